"""Gridded field states, normalization statistics, and file containers.

A field state is one snapshot of the model domain: ``v`` physical
variables followed by ``f`` known forcing channels on a doubly periodic
``h x w`` grid.  States are immutable; every operation returns a new
one.  Normalization statistics are per-variable, pooled over space and
time of the training set, so one frozen set of statistics serves both
training and inference.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAGIC = b"DEF1"


@dataclass(frozen=True, eq=False)
class FieldState:
    """One snapshot: (vars + forcings, height, width) scalar field."""

    vars: int
    forcings: int
    height: int
    width: int
    data: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        if self.vars < 1:
            raise ValueError("need at least one physical variable")
        if self.forcings < 0 or self.height < 1 or self.width < 1:
            raise ValueError("bad grid dimensions")
        shape = (self.vars + self.forcings, self.height, self.width)
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != shape[0] * self.height * self.width:
            raise ValueError(
                f"data has {arr.size} values, expected {shape[0] * self.height * self.width}"
            )
        arr = np.ascontiguousarray(arr.reshape(shape))
        if not np.all(np.isfinite(arr)):
            raise ValueError("field state contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def physical(self) -> np.ndarray:
        """The v physical channels, shape (v, h, w)."""
        return self.data[: self.vars]

    @property
    def forcing(self) -> np.ndarray:
        """The f forcing channels, shape (f, h, w)."""
        return self.data[self.vars :]

    def with_physical(self, phys: np.ndarray, time_index: int | None = None) -> "FieldState":
        """New state with replaced physical channels, forcings kept."""
        phys = np.asarray(phys, dtype=np.float64)
        if phys.shape != (self.vars, self.height, self.width):
            raise ValueError(f"physical slab shape {phys.shape} does not match state")
        data = np.concatenate([phys, self.forcing], axis=0)
        t = self.time_index if time_index is None else time_index
        return FieldState(self.vars, self.forcings, self.height, self.width, data, t)

    def with_forcing(self, forc: np.ndarray, time_index: int | None = None) -> "FieldState":
        """New state with replaced forcing channels."""
        forc = np.asarray(forc, dtype=np.float64)
        if forc.shape != (self.forcings, self.height, self.width):
            raise ValueError(f"forcing slab shape {forc.shape} does not match state")
        data = np.concatenate([self.physical, forc], axis=0)
        t = self.time_index if time_index is None else time_index
        return FieldState(self.vars, self.forcings, self.height, self.width, data, t)


@dataclass(frozen=True)
class NormStats:
    """Per-variable mean and population std, pooled over space and time."""

    mu: tuple
    sigma: tuple
    epsilon: float = 1e-6

    def __post_init__(self):
        mu = tuple(float(m) for m in np.atleast_1d(self.mu))
        sigma = tuple(float(s) for s in np.atleast_1d(self.sigma))
        if len(mu) != len(sigma):
            raise ValueError("mu and sigma must have equal length")
        if any(s < 0 for s in sigma):
            raise ValueError("sigma must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_vars(self) -> int:
        return len(self.mu)

    def scale(self) -> np.ndarray:
        """Divisor per variable, sigma + epsilon; never zero."""
        return np.asarray(self.sigma, dtype=np.float64) + self.epsilon

    def to_dict(self) -> dict:
        return {"mu": list(self.mu), "sigma": list(self.sigma), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(mu=tuple(d["mu"]), sigma=tuple(d["sigma"]), epsilon=float(d["epsilon"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def compute_stats(dataset: Sequence[FieldState], epsilon: float = 1e-6) -> NormStats:
    """Pooled per-variable mean and population std over a dataset.

    Pooling over every state keeps the statistics fixed for the whole
    experiment; per-state statistics would make the mapping between
    physical and normalized units depend on the sample.
    """
    if len(dataset) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    v = dataset[0].vars
    for s in dataset:
        if s.vars != v or s.height != dataset[0].height or s.width != dataset[0].width:
            raise ValueError("dataset states disagree on shape")
    stacked = np.stack([s.physical for s in dataset])  # (n, v, h, w)
    mu = stacked.mean(axis=(0, 2, 3))
    sigma = stacked.std(axis=(0, 2, 3))  # population (ddof=0)
    return NormStats(mu=tuple(mu), sigma=tuple(sigma), epsilon=epsilon)


def _check_stats(x: FieldState, stats: NormStats) -> None:
    if stats.n_vars != x.vars:
        raise ValueError(f"stats cover {stats.n_vars} variables, state has {x.vars}")


def normalize(x: FieldState, stats: NormStats) -> FieldState:
    """(x - mu) / (sigma + epsilon) on physical channels; forcings untouched."""
    _check_stats(x, stats)
    mu = np.asarray(stats.mu)[:, None, None]
    phys = (x.physical - mu) / stats.scale()[:, None, None]
    return x.with_physical(phys)


def denormalize(x: FieldState, stats: NormStats) -> FieldState:
    """Exact inverse of normalize for the same statistics."""
    _check_stats(x, stats)
    mu = np.asarray(stats.mu)[:, None, None]
    phys = x.physical * stats.scale()[:, None, None] + mu
    return x.with_physical(phys)


def normalize_array(phys: np.ndarray, stats: NormStats) -> np.ndarray:
    """Array form of normalize for (..., v, h, w) physical slabs."""
    mu = np.asarray(stats.mu)[:, None, None]
    return (phys - mu) / stats.scale()[:, None, None]


def denormalize_array(phys: np.ndarray, stats: NormStats) -> np.ndarray:
    mu = np.asarray(stats.mu)[:, None, None]
    return phys * stats.scale()[:, None, None] + mu


def make_windows(dataset: Sequence[FieldState], horizon: int = 1) -> list:
    """(input, target) pairs where target is `horizon` steps ahead.

    Targets carry physical channels only (f = 0): forcings at the target
    time are known and recomputable, so they are never predicted.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if len(dataset) < horizon + 1:
        raise ValueError(f"need at least {horizon + 1} states, got {len(dataset)}")
    pairs = []
    for i in range(len(dataset) - horizon):
        x = dataset[i]
        tgt = dataset[i + horizon]
        target = FieldState(
            tgt.vars, 0, tgt.height, tgt.width, tgt.physical, tgt.time_index
        )
        pairs.append((x, target))
    return pairs


# ---------------------------------------------------------------------------
# Binary container: b"DEF1", five little-endian u32 (v, f, h, w, n_states),
# then n_states * (v+f) * h * w little-endian float32 values, row-major.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIII")


def write_dataset(path, states: Sequence[FieldState]) -> None:
    if len(states) == 0:
        raise ValueError("refusing to write an empty dataset")
    first = states[0]
    for s in states:
        if (s.vars, s.forcings, s.height, s.width) != (
            first.vars,
            first.forcings,
            first.height,
            first.width,
        ):
            raise ValueError("all states in a file must share shape")
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(MAGIC, first.vars, first.forcings, first.height, first.width, len(states))
        )
        for s in states:
            fh.write(s.data.astype("<f4").tobytes())


def read_raw(path):
    """Header fields plus the raw (n, v+f, h, w) float64 array."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, v, f, h, w, n = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        count = n * (v + f) * h * w
        payload = np.frombuffer(fh.read(count * 4), dtype="<f4")
        if payload.size != count:
            raise ValueError(f"{path}: payload has {payload.size} values, expected {count}")
    arr = payload.astype(np.float64).reshape(n, v + f, h, w)
    return v, f, h, w, arr


def read_dataset(path, start_time_index: int = 0) -> list:
    """Load states with consecutive time indices from start_time_index."""
    v, f, h, w, arr = read_raw(path)
    return [
        FieldState(v, f, h, w, arr[i], start_time_index + i) for i in range(arr.shape[0])
    ]
