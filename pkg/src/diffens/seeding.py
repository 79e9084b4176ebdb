"""Deterministic seed derivation.

Every stochastic component takes an explicit integer seed.  Derived seeds
(per member, per step, per walk) are produced by mixing the parent seed
with a stream index through a splitmix64-style finalizer, so results do
not depend on execution order or batching.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def mix64(seed: int, stream: int) -> int:
    """Mix a parent seed with a stream index into a new 64-bit seed."""
    z = (int(seed) * 0x9E3779B97F4A7C15 + int(stream) + 1) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def rng_for(seed: int, *streams: int) -> np.random.Generator:
    """Generator for a seed mixed with zero or more stream indices."""
    s = int(seed)
    for idx in streams:
        s = mix64(s, idx)
    return np.random.default_rng(s)
