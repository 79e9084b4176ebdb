"""Adam with global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .params import ParamStore


class Adam:
    """Adam over a flat parameter store.

    The update always passes through `clip_and_step`: the gradient is
    rescaled by g / max(1, ||g||_2 / max_norm) before the moment
    updates, so a clip threshold of infinity reduces to plain Adam.
    """

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros_like(store.params)
        self.v = np.zeros_like(store.params)

    def clip_and_step(self, max_norm: float) -> float:
        """Clip the stored gradient to max_norm and apply one update.

        Returns the gradient norm actually applied (after clipping).
        Raises on non-finite gradients rather than corrupting moments.
        """
        g = self.store.grads
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        norm = float(np.linalg.norm(g.astype(np.float64)))
        factor = 1.0 / max(1.0, norm / max_norm)
        if factor != 1.0:
            g = g * factor
        self.t += 1
        self.m += (1.0 - self.beta1) * (g - self.m)
        self.v += (1.0 - self.beta2) * (g * g - self.v)
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        self.store.params -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
            self.store.dtype
        )
        return norm * factor
