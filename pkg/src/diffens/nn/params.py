"""Flat parameter storage.

All parameters of a network live in one flat vector with a parallel
flat gradient vector; each named parameter is a reshaped view into
them.  Optimizers then operate on two 1D arrays, and checkpointing is
a single contiguous dump.
"""

from __future__ import annotations

import numpy as np

from . import engine


class ParamStore:
    """Declare-then-build container of named parameter views."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._decls = []  # (name, shape, init, fan_in)
        self.params = None
        self.grads = None
        self.tensors = {}

    def declare(self, name: str, shape, init: str = "normal", fan_in: int | None = None):
        """Register a parameter before build; returns its name."""
        if self.params is not None:
            raise RuntimeError("store already built")
        if any(n == name for n, *_ in self._decls):
            raise ValueError(f"duplicate parameter name {name!r}")
        if init not in ("normal", "zeros"):
            raise ValueError(f"unknown init {init!r}")
        self._decls.append((name, tuple(int(s) for s in shape), init, fan_in))
        return name

    def build(self, rng: np.random.Generator) -> None:
        """Allocate the flat vectors, initialize, and create views."""
        if self.params is not None:
            raise RuntimeError("store already built")
        total = sum(int(np.prod(shape)) for _, shape, _, _ in self._decls)
        self.params = np.zeros(total, dtype=self.dtype)
        self.grads = np.zeros(total, dtype=self.dtype)
        off = 0
        for name, shape, init, fan_in in self._decls:
            n = int(np.prod(shape))
            if init == "normal":
                fi = fan_in if fan_in else max(int(np.prod(shape[:-1])), 1)
                vals = rng.standard_normal(n) / np.sqrt(fi)
                self.params[off : off + n] = vals.astype(self.dtype)
            view = self.params[off : off + n].reshape(shape)
            gview = self.grads[off : off + n].reshape(shape)
            self.tensors[name] = engine.parameter(view, gview)
            off += n

    def __getitem__(self, name: str):
        return self.tensors[name]

    @property
    def size(self) -> int:
        return 0 if self.params is None else self.params.size

    def zero_grad(self) -> None:
        self.grads[:] = 0

    def set_flat(self, values: np.ndarray) -> None:
        """Overwrite all parameters from a flat vector (e.g. a checkpoint)."""
        values = np.asarray(values)
        if values.size != self.params.size:
            raise ValueError(f"expected {self.params.size} parameters, got {values.size}")
        self.params[:] = values.astype(self.dtype)

    def get_flat(self) -> np.ndarray:
        return self.params.copy()
