"""Synthetic truth system: coupled 2D periodic advection-diffusion fields.

The system advances each physical channel with first-order upwind
advection and explicit (FTCS) diffusion, dimensionally split, plus an
optional zero-mean oscillating source and a bounded nonlinear
cross-channel coupling.  Every substep conserves the domain sum exactly
on the periodic grid, which gives the testbed a physically meaningful
invariant to verify forecasts against.

The coupling is a pointwise differential rotation of channel-pair
anomalies: at each cell the (i, i+1) anomaly pair is rotated by an angle
set by a saturated, one-cell-shifted neighbouring anomaly.  Rotations
conserve the pooled anomaly energy exactly (no blow-up at any strength)
and, after re-centering, each channel's domain mean, yet their state
dependence makes the flow chaotic: small perturbations grow until they
saturate at the attractor scale, as in real geophysical flows, so
ensembles of perturbed runs carry information a single run does not.

Forcing channels are spatially constant sin/cos clocks at two periods
(a short "daily" one and a long "annual" one), the analog of known
exogenous inputs a forecaster may condition on but never predicts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import FieldState
from .seeding import rng_for


@dataclass(frozen=True)
class DynamicsConfig:
    """Grid, transport, and forcing parameters of the truth system.

    dt = dx = 1 throughout, so `velocity` is in cells per step and
    `kappa` in cells^2 per step.  Stability requires |vx| + |vy| <= 1
    (upwind CFL) and kappa <= 0.25 (explicit 2D diffusion limit); both
    are enforced at construction.
    """

    vars: int = 4
    forcings: int = 4
    height: int = 32
    width: int = 16
    # incommensurate wrap periods so the flow does not close into a short
    # loop; keeps the training trajectory exploring the torus
    velocity: tuple = (0.55, 0.2)
    kappa: tuple | None = None
    period_day: int = 4
    period_year: int = 128
    source_amplitude: float = 0.05
    coupling: float = 1.2
    n_bumps: int = 3

    def __post_init__(self):
        if self.vars < 1:
            raise ValueError("need at least one physical variable")
        if self.forcings not in (0, 2, 4):
            raise ValueError("forcings must be 0, 2 (daily pair) or 4 (daily + annual)")
        if self.height < 2 or self.width < 2:
            raise ValueError("grid too small")
        vx, vy = self.velocity
        if abs(vx) + abs(vy) > 1.0:
            raise ValueError(f"CFL violated: |vx|+|vy| = {abs(vx) + abs(vy)} > 1")
        if self.kappa is None:
            k = np.linspace(0.01, 0.04, self.vars) if self.vars > 1 else np.array([0.02])
            object.__setattr__(self, "kappa", tuple(float(x) for x in k))
        else:
            object.__setattr__(self, "kappa", tuple(float(x) for x in self.kappa))
        if len(self.kappa) != self.vars:
            raise ValueError("kappa must provide one value per variable")
        if any(k < 0 or k > 0.25 for k in self.kappa):
            raise ValueError("each kappa must lie in [0, 0.25] for stability")
        if self.period_day < 2 or self.period_year < 2:
            raise ValueError("forcing periods must be >= 2 steps")
        if self.source_amplitude < 0:
            raise ValueError("source amplitude must be non-negative")
        if self.coupling < 0:
            raise ValueError("coupling strength must be non-negative")


@dataclass(frozen=True)
class ForcingSpec:
    """The subset of the dynamics config a forecaster needs at inference:
    enough to recompute forcing channels for any time index."""

    forcings: int
    height: int
    width: int
    period_day: int
    period_year: int

    @classmethod
    def from_config(cls, cfg: DynamicsConfig) -> "ForcingSpec":
        return cls(cfg.forcings, cfg.height, cfg.width, cfg.period_day, cfg.period_year)

    def to_dict(self) -> dict:
        return {
            "forcings": self.forcings,
            "height": self.height,
            "width": self.width,
            "period_day": self.period_day,
            "period_year": self.period_year,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForcingSpec":
        return cls(
            int(d["forcings"]),
            int(d["height"]),
            int(d["width"]),
            int(d["period_day"]),
            int(d["period_year"]),
        )


def forcing_channels(t: int, cfg) -> np.ndarray:
    """Forcing slab (f, h, w) at integer time t; spatially constant clocks.

    Accepts a DynamicsConfig or a ForcingSpec.
    """
    phases = []
    if cfg.forcings >= 2:
        a = 2.0 * np.pi * t / cfg.period_day
        phases += [np.sin(a), np.cos(a)]
    if cfg.forcings == 4:
        a = 2.0 * np.pi * t / cfg.period_year
        phases += [np.sin(a), np.cos(a)]
    out = np.empty((cfg.forcings, cfg.height, cfg.width))
    for i, p in enumerate(phases):
        out[i] = p
    return out


def _source_pattern(cfg: DynamicsConfig) -> np.ndarray:
    """Fixed zero-mean spatial pattern per channel, shape (v, h, w)."""
    i = np.arange(cfg.height)[:, None]
    j = np.arange(cfg.width)[None, :]
    out = np.empty((cfg.vars, cfg.height, cfg.width))
    for c in range(cfg.vars):
        ki = 1 + c % 3
        kj = 1 + (c + 1) % 2
        psi = 2.0 * np.pi * c / max(cfg.vars, 1)
        out[c] = np.sin(2.0 * np.pi * (ki * i / cfg.height + kj * j / cfg.width) + psi)
    return out


def _couple_rotate(u: np.ndarray, amp: float) -> np.ndarray:
    """Differential rotation of channel-pair anomalies (the nonlinearity).

    For each channel pair (i, i+1 mod v), every grid cell's anomaly pair
    is rotated by an angle amp*tanh(g) where g is the one-cell-shifted
    anomaly of channel i+2 mod v normalised to unit RMS, so the swirl
    pattern tracks the anomaly's shape at any amplitude.  A pointwise
    rotation conserves the pair's pointwise anomaly energy for any angle
    field, so the coupling cannot blow up however strong it is;
    re-centering afterwards keeps every channel's domain mean exactly
    conserved.  Because the angle depends on the state, the map stretches
    and folds anomalies, which is what makes the system chaotic.

    Needs at least two channels; with one channel the slab is returned
    unchanged.
    """
    v = u.shape[0]
    if v < 2 or amp == 0.0:
        return u
    means = u.mean(axis=(1, 2), keepdims=True)
    a = u - means
    for i in range(v):
        j = (i + 1) % v
        k = (i + 2) % v
        g = np.roll(a[k], 1, axis=-1)
        theta = amp * np.tanh(g / (np.sqrt(np.mean(g * g)) + 1e-12))
        c, s = np.cos(theta), np.sin(theta)
        ai = c * a[i] + s * a[j]
        aj = -s * a[i] + c * a[j]
        a[i] = ai
        a[j] = aj
    a -= a.mean(axis=(1, 2), keepdims=True)
    return means + a


def _advect_upwind(u: np.ndarray, vx: float, vy: float) -> np.ndarray:
    """Dimensionally split first-order upwind step, periodic, dt=dx=1."""
    if vx > 0:
        u = u - vx * (u - np.roll(u, 1, axis=-1))
    elif vx < 0:
        u = u - vx * (np.roll(u, -1, axis=-1) - u)
    if vy > 0:
        u = u - vy * (u - np.roll(u, 1, axis=-2))
    elif vy < 0:
        u = u - vy * (np.roll(u, -1, axis=-2) - u)
    return u


def _diffuse(u: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    lap = (
        np.roll(u, 1, axis=-1)
        + np.roll(u, -1, axis=-1)
        + np.roll(u, 1, axis=-2)
        + np.roll(u, -1, axis=-2)
        - 4.0 * u
    )
    return u + kappa[:, None, None] * lap


def advance(x: FieldState, cfg: DynamicsConfig) -> FieldState:
    """One truth step: advect, diffuse, couple, add source; forcings move to t+1."""
    if (x.vars, x.forcings, x.height, x.width) != (
        cfg.vars,
        cfg.forcings,
        cfg.height,
        cfg.width,
    ):
        raise ValueError("state shape does not match dynamics config")
    vx, vy = cfg.velocity
    u = _advect_upwind(x.physical, vx, vy)
    u = _diffuse(u, np.asarray(cfg.kappa))
    if cfg.coupling > 0:
        u = _couple_rotate(u, cfg.coupling)
    if cfg.source_amplitude > 0:
        phase = 2.0 * np.pi * x.time_index / cfg.period_day
        osc = np.sin(phase + np.pi * np.arange(cfg.vars) / max(cfg.vars, 1))
        u = u + cfg.source_amplitude * osc[:, None, None] * _source_pattern(cfg)
    t_next = x.time_index + 1
    data = np.concatenate([u, forcing_channels(t_next, cfg)], axis=0)
    return FieldState(cfg.vars, cfg.forcings, cfg.height, cfg.width, data, t_next)


def initial_state(cfg: DynamicsConfig, seed: int) -> FieldState:
    """Smooth random bump field per channel at time 0.

    Each channel gets a distinct baseline offset plus a few periodic
    Gaussian bumps, so the channels have clearly different pooled
    statistics.
    """
    rng = rng_for(seed)
    i = np.arange(cfg.height)[:, None]
    j = np.arange(cfg.width)[None, :]
    phys = np.empty((cfg.vars, cfg.height, cfg.width))
    for c in range(cfg.vars):
        f = np.full((cfg.height, cfg.width), float(c))
        for _ in range(cfg.n_bumps):
            ci = rng.uniform(0, cfg.height)
            cj = rng.uniform(0, cfg.width)
            amp = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
            s = rng.uniform(1.5, 4.0)
            di = np.minimum(np.abs(i - ci), cfg.height - np.abs(i - ci))
            dj = np.minimum(np.abs(j - cj), cfg.width - np.abs(j - cj))
            f = f + amp * np.exp(-(di**2 + dj**2) / (2.0 * s**2))
        phys[c] = f
    data = np.concatenate([phys, forcing_channels(0, cfg)], axis=0)
    return FieldState(cfg.vars, cfg.forcings, cfg.height, cfg.width, data, 0)


def generate_trajectory(cfg: DynamicsConfig, n_steps: int, seed: int) -> list:
    """Trajectory of n_steps states starting at time 0 (seeded, bit-stable)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    states = [initial_state(cfg, seed)]
    for _ in range(n_steps - 1):
        states.append(advance(states[-1], cfg))
    return states
