"""Diffusion-perturbed ensemble forecasting on a synthetic testbed."""

__version__ = "0.1.0"

from .grid import FieldState, NormStats, compute_stats, denormalize, make_windows, normalize

__all__ = [
    "FieldState",
    "NormStats",
    "compute_stats",
    "normalize",
    "denormalize",
    "make_windows",
    "__version__",
]
