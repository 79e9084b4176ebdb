"""Deterministic autoregressive forecaster.

The forecaster maps one normalized state (physical plus forcing
channels) to the normalized physical channels one step ahead.  Rolling
it out autoregressively gives the deterministic baseline forecast that
ensemble perturbation is later wrapped around.  Everything here works
in normalized units; the model carries its NormStats so callers can
map back to physical units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ForcingSpec, forcing_channels
from .grid import FieldState, NormStats
from .nn import Adam, NetSpec, UNet, engine, load_checkpoint, save_checkpoint
from .seeding import mix64, rng_for


def default_forecaster_spec(n_vars: int, n_forcings: int) -> NetSpec:
    return NetSpec(
        in_channels=n_vars + n_forcings,
        out_channels=n_vars,
        stages=((16, True), (32, True)),
        activation="silu",
        temb_width=0,
        attention=True,
    )


@dataclass
class ForecasterModel:
    """Trained one-step predictor plus the context to apply it."""

    net: UNet
    stats: NormStats
    forcing: ForcingSpec
    step_count: int = 0

    @property
    def n_vars(self) -> int:
        return self.net.spec.out_channels

    def predict_batch(self, data: np.ndarray) -> np.ndarray:
        """Physical channels one step ahead for (B, v+f, h, w) input."""
        return self.net.predict(data).astype(np.float64)


@dataclass
class TrainingLog:
    """Per-epoch mean losses plus counters of what the loop actually did."""

    losses: list = field(default_factory=list)
    n_steps: int = 0
    n_samples: int = 0
    # used by the diffusion trainer; kept here so both trainers share a type
    n_conditioned: int = 0
    n_unconditioned: int = 0
    n_advanced: int = 0


def train_forecaster(
    pairs,
    stats: NormStats,
    forcing: ForcingSpec,
    spec: NetSpec | None = None,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-3,
    tau: float = 1.0,
    seed: int = 0,
):
    """Train on normalized (input, target) pairs; returns (model, log).

    Inputs are full states (v+f channels), targets physical channels
    only.  Mean squared error per element, Adam with global-norm
    clipping at tau, seeded shuffling; same seed and data give
    bit-identical parameters.  Zero epochs returns the freshly
    initialized model and an empty loss curve.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    if epochs < 0 or batch_size < 1:
        raise ValueError("bad epochs or batch size")
    x0, y0 = pairs[0]
    if spec is None:
        spec = default_forecaster_spec(x0.vars, x0.forcings)
    if spec.temb_width:
        raise ValueError("forecaster network must not take a timestep")
    inputs = np.stack([p.data for p, _ in pairs]).astype(np.float32)
    targets = np.stack([t.physical for _, t in pairs]).astype(np.float32)
    if targets.shape[1] != spec.out_channels or inputs.shape[1] != spec.in_channels:
        raise ValueError("pair channel counts do not match the network spec")

    net = UNet(spec, init_seed=mix64(seed, 0))
    opt = Adam(net.store, lr=lr)
    shuffle = rng_for(seed, 1)
    log = TrainingLog()
    n = inputs.shape[0]
    for _ in range(epochs):
        perm = shuffle.permutation(n)
        sq_sum = 0.0
        el_sum = 0
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            net.store.zero_grad()
            out = net.forward(inputs[idx])
            diff = engine.sub(out, engine.constant(targets[idx]))
            loss = engine.mean_all(engine.mul(diff, diff))
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise RuntimeError(f"training diverged at step {log.n_steps}: loss={lval}")
            loss.backward()
            opt.clip_and_step(tau)
            sq_sum += lval * out.data.size
            el_sum += out.data.size
            log.n_steps += 1
            log.n_samples += len(idx)
        log.losses.append(sq_sum / el_sum)
    return ForecasterModel(net, stats, forcing, step_count=log.n_steps), log


def step(model: ForecasterModel, x: FieldState) -> FieldState:
    """One forecast step on a normalized state.

    Physical channels are replaced by the prediction; forcing channels
    are recomputed for time_index + 1, which the forecaster never
    predicts because they are known exactly.
    """
    fs = model.forcing
    if (x.vars, x.forcings, x.height, x.width) != (
        model.n_vars,
        fs.forcings,
        fs.height,
        fs.width,
    ):
        raise ValueError("state shape does not match the model")
    phys = model.predict_batch(x.data[None])[0]
    t_next = x.time_index + 1
    data = np.concatenate([phys, forcing_channels(t_next, fs)], axis=0)
    return FieldState(x.vars, x.forcings, x.height, x.width, data, t_next)


def rollout(model: ForecasterModel, x0: FieldState, n_steps: int) -> list:
    """n_steps autoregressive steps; state i has time_index t0 + i + 1."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    out = []
    x = x0
    for _ in range(n_steps):
        x = step(model, x)
        out.append(x)
    return out


def save_forecaster(path, model: ForecasterModel) -> None:
    extra = {
        "kind": "forecaster",
        "stats": model.stats.to_dict(),
        "forcing": model.forcing.to_dict(),
    }
    save_checkpoint(path, model.net, step=model.step_count, extra=extra)


def load_forecaster(path) -> ForecasterModel:
    net, step_count, extra = load_checkpoint(path)
    if extra.get("kind") != "forecaster":
        raise ValueError(f"{path} is not a forecaster checkpoint")
    return ForecasterModel(
        net,
        NormStats.from_dict(extra["stats"]),
        ForcingSpec.from_dict(extra["forcing"]),
        step_count=step_count,
    )
