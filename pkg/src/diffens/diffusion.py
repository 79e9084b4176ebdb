"""Conditional denoising diffusion for initial-condition perturbation.

A noise-prediction network is trained on normalized physical states,
conditioned on the state itself (with the conditioning slab dropped at
random during training so the same network also models the
unconditional distribution).  At inference the reverse process is
solved either by full ancestral sampling or by a second-order
multistep ODE solver in half-log-SNR time, with classifier-free
guidance blending the conditional and unconditional predictions.
Sampling conditioned on a state x produces a perturbed-but-consistent
variant of x; chaining K such draws widens the perturbation.

Everything operates on normalized physical slabs (v, h, w); forcing
channels pass through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forecaster import ForecasterModel, TrainingLog
from .grid import FieldState, NormStats
from .nn import Adam, NetSpec, UNet, engine, load_checkpoint, save_checkpoint
from .seeding import mix64, rng_for


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule; alpha_bars has a leading 1 so index t is
    the product over steps 1..t."""

    betas: np.ndarray
    alphas: np.ndarray = None
    alpha_bars: np.ndarray = None

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        abar = np.concatenate([[1.0], np.cumprod(alphas)])
        for a in (betas, alphas, abar):
            a.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", abar)

    @classmethod
    def linear(cls, t_steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        if t_steps < 1:
            raise ValueError("t_steps must be >= 1")
        return cls(betas=np.linspace(beta_start, beta_end, t_steps))

    @property
    def t_steps(self) -> int:
        return self.betas.size

    def half_log_snr(self, t) -> np.ndarray:
        """lambda(t) = 0.5 * log(abar_t / (1 - abar_t))."""
        ab = self.alpha_bars[np.asarray(t)]
        return 0.5 * (np.log(ab) - np.log1p(-ab))

    def to_dict(self) -> dict:
        return {"betas": [float(b) for b in self.betas]}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(betas=np.asarray(d["betas"]))


@dataclass(frozen=True)
class GuidanceConfig:
    """How to perturb: guidance weight, walk count, solver choice.

    `solver_steps` is the evaluation budget of the reduced-step solver.
    `ancestral_steps` optionally coarsens the ancestral chain to that
    many transitions (None keeps the full schedule), trading a little
    sampling fidelity for a large speedup.
    """

    omega: float = 0.5
    walks: int = 1
    solver: str = "dpm2m"
    solver_steps: int = 20
    ancestral_steps: int | None = None

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if self.walks < 1:
            raise ValueError("walks must be >= 1")
        if self.solver not in ("ancestral", "dpm2m"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.solver_steps < 1:
            raise ValueError("solver_steps must be >= 1")
        if self.ancestral_steps is not None and self.ancestral_steps < 2:
            raise ValueError("ancestral_steps must be >= 2 when set")


def default_denoiser_spec(n_vars: int) -> NetSpec:
    # input: noisy slab, conditioning slab, and a 0/1 conditioning indicator
    return NetSpec(
        in_channels=2 * n_vars + 1,
        out_channels=n_vars,
        stages=((16, True), (32, True)),
        activation="silu",
        temb_width=32,
        attention=True,
    )


@dataclass
class DenoiserModel:
    """Noise-prediction network plus its schedule and normalization."""

    net: UNet
    schedule: NoiseSchedule
    stats: NormStats
    step_count: int = 0

    @property
    def n_vars(self) -> int:
        return self.net.spec.out_channels

    def input_slab(self, z: np.ndarray, cond: np.ndarray | None) -> np.ndarray:
        """Stack noisy slab, conditioning slab, and indicator channel.

        The null condition is an all-zero slab with indicator 0.
        """
        b, v, h, w = z.shape
        if cond is None:
            cond = np.zeros_like(z)
            ind = np.zeros((b, 1, h, w), dtype=z.dtype)
        else:
            if cond.shape != z.shape:
                raise ValueError("condition shape must match the noisy slab")
            ind = np.ones((b, 1, h, w), dtype=z.dtype)
        return np.concatenate([z, cond, ind], axis=1)

    def predict_eps(self, z: np.ndarray, t, cond: np.ndarray | None) -> np.ndarray:
        """Predicted noise for (B, v, h, w) at timesteps t (int or (B,))."""
        return self.net.predict(self.input_slab(z, cond), t).astype(np.float64)


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t may be a scalar or one value per leading-axis row of x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("eps must have the shape of x0")
    tv = np.asarray(t)
    if np.any(tv < 1) or np.any(tv > schedule.t_steps):
        raise ValueError(f"t must lie in [1, {schedule.t_steps}]")
    ab = schedule.alpha_bars[tv]
    if tv.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, omega: float) -> np.ndarray:
    """Guided noise estimate (1 + omega) * eps_cond - omega * eps_uncond.

    Evaluated as eps_cond + omega * (eps_cond - eps_uncond) so that equal
    estimates are a floating-point fixed point for every omega.
    """
    if omega < 0:
        raise ValueError("omega must be non-negative")
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError("conditional and unconditional estimates must match in shape")
    e_c = np.asarray(eps_cond)
    e_u = np.asarray(eps_uncond)
    if omega == 0.0:
        return e_c.copy()
    return e_c + omega * (e_c - e_u)


def _guided_eps(eps_fn, z, t, cond, omega):
    if cond is None or omega == 0.0:
        return np.asarray(eps_fn(z, t, cond), dtype=np.float64)
    e_c = np.asarray(eps_fn(z, t, cond), dtype=np.float64)
    e_u = np.asarray(eps_fn(z, t, None), dtype=np.float64)
    return cfg_combine(e_c, e_u, omega)


def _draw(rngs, shape):
    """Standard normal draw; one generator for the batch or one per row."""
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal(shape)
    if len(rngs) != shape[0]:
        raise ValueError("need one generator per batch row")
    return np.stack([r.standard_normal(shape[1:]) for r in rngs])


def _batch_times(t: int, b: int) -> np.ndarray:
    return np.full(b, t, dtype=np.int64)


def _ancestral_nodes(schedule: NoiseSchedule, n_steps: int | None) -> np.ndarray:
    """Decreasing timestep sequence T, ..., 1 for the ancestral chain.

    None keeps every step; otherwise n_steps+1 nodes uniform in t
    (duplicates dropped), endpoints pinned to T and 1.
    """
    T = schedule.t_steps
    if n_steps is None or n_steps >= T:
        return np.arange(T, 0, -1, dtype=np.int64)
    nodes = np.unique(np.round(np.linspace(T, 1, n_steps + 1)).astype(np.int64))[::-1]
    nodes[0], nodes[-1] = T, 1
    return nodes


def sample_ancestral_batch(eps_fn, schedule: NoiseSchedule, cond, omega, rngs,
                           shape=None, n_steps: int | None = None) -> np.ndarray:
    """Reverse diffusion chain; returns (B, ...) samples.

    eps_fn(z, t, cond) predicts noise; cond may be None for
    unconditional sampling, in which case `shape` gives (B, ...).
    By default every schedule step is visited; n_steps coarsens the
    chain to that many transitions, with each jump s -> r using the
    aggregate alpha_bar ratio in place of the single-step beta (the
    full chain is recovered exactly when the stride is 1).
    """
    if omega < 0:
        raise ValueError("omega must be non-negative")
    shape = np.shape(cond) if cond is not None else tuple(shape)
    nodes = _ancestral_nodes(schedule, n_steps)
    z = _draw(rngs, shape)
    for i in range(1, nodes.size):
        s, r = int(nodes[i - 1]), int(nodes[i])
        ab_s = schedule.alpha_bars[s]
        a_eff = ab_s / schedule.alpha_bars[r]
        b_eff = 1.0 - a_eff
        e = _guided_eps(eps_fn, z, _batch_times(s, shape[0]), cond, omega)
        mu = (z - b_eff / np.sqrt(1.0 - ab_s) * e) / np.sqrt(a_eff)
        z = mu + np.sqrt(b_eff) * _draw(rngs, shape)
    # final transition to t=0: plain denoise, no noise injection
    s = int(nodes[-1])
    ab_s = schedule.alpha_bars[s]
    beta = 1.0 - schedule.alphas[s - 1]
    e = _guided_eps(eps_fn, z, _batch_times(s, shape[0]), cond, omega)
    return (z - beta / np.sqrt(1.0 - ab_s) * e) / np.sqrt(schedule.alphas[s - 1])


def _dpm_nodes(schedule: NoiseSchedule, n_steps: int) -> np.ndarray:
    """Timestep nodes T = t_0 > ... > t_K = 1, uniform in half-log-SNR.

    Nodes snap to the discrete schedule; consecutive duplicates (only
    possible when n_steps approaches T) are dropped.
    """
    T = schedule.t_steps
    if n_steps > T:
        raise ValueError(f"solver steps {n_steps} exceed schedule length {T}")
    lam = schedule.half_log_snr(np.arange(1, T + 1))  # increasing toward t=1? no: t=1 largest
    grid = np.linspace(lam[T - 1], lam[0], n_steps + 1)  # lambda(T) .. lambda(1)
    nodes = []
    for g in grid:
        t = int(np.argmin(np.abs(lam - g))) + 1
        if not nodes or t != nodes[-1]:
            nodes.append(t)
    nodes[0], nodes[-1] = T, 1
    return np.asarray(nodes, dtype=np.int64)


def sample_dpm2m_batch(eps_fn, schedule: NoiseSchedule, cond, omega, n_steps, rngs,
                       shape=None) -> np.ndarray:
    """Second-order multistep probability-flow solve in n_steps evaluations.

    Data-prediction form: each network call is converted to an estimate
    of the clean sample, and the semi-linear update between nodes is
    exact in its linear part.  The first update is first order; later
    updates add the standard second-order multistep correction.
    """
    if omega < 0:
        raise ValueError("omega must be non-negative")
    shape = np.shape(cond) if cond is not None else tuple(shape)
    nodes = _dpm_nodes(schedule, n_steps)
    lam = schedule.half_log_snr(nodes)
    ab = schedule.alpha_bars[nodes]
    alpha = np.sqrt(ab)
    sigma = np.sqrt(1.0 - ab)

    z = _draw(rngs, shape)
    x0_prev = None  # clean-sample estimate at the previous node
    h_prev = None
    for i in range(1, nodes.size):
        e = _guided_eps(eps_fn, z, _batch_times(int(nodes[i - 1]), shape[0]), cond, omega)
        x0 = (z - sigma[i - 1] * e) / alpha[i - 1]
        h = lam[i] - lam[i - 1]
        if x0_prev is None:
            d = x0
        else:
            r = h_prev / h
            d = x0 + (x0 - x0_prev) / (2.0 * r)
        z = (sigma[i] / sigma[i - 1]) * z - alpha[i] * np.expm1(-h) * d
        x0_prev, h_prev = x0, h
    return z


def sample_ancestral(model: DenoiserModel, condition: np.ndarray, omega: float,
                     seed: int) -> np.ndarray:
    """One ancestral sample (v, h, w) conditioned on a normalized slab."""
    out = sample_ancestral_batch(
        model.predict_eps, model.schedule, np.asarray(condition)[None], omega, [rng_for(seed)]
    )
    return out[0]


def sample_dpm2m(model: DenoiserModel, condition: np.ndarray, omega: float,
                 n_steps: int, seed: int) -> np.ndarray:
    """One fast-solver sample (v, h, w) conditioned on a normalized slab."""
    out = sample_dpm2m_batch(
        model.predict_eps, model.schedule, np.asarray(condition)[None], omega, n_steps,
        [rng_for(seed)],
    )
    return out[0]


def perturb_batch(model: DenoiserModel, states: np.ndarray, cfg: GuidanceConfig,
                  seeds) -> np.ndarray:
    """K chained conditional samples per row of (B, v, h, w).

    Walk k of row b uses the generator seeded by mix64(seeds[b], k), so
    the result is independent of batch composition.
    """
    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("states must be (B, v, h, w)")
    seeds = [int(s) for s in seeds]
    if len(seeds) != x.shape[0]:
        raise ValueError("need one seed per state")
    for k in range(1, cfg.walks + 1):
        rngs = [rng_for(s, k) for s in seeds]
        if cfg.solver == "ancestral":
            x = sample_ancestral_batch(
                model.predict_eps, model.schedule, x, cfg.omega, rngs,
                n_steps=cfg.ancestral_steps,
            )
        else:
            x = sample_dpm2m_batch(
                model.predict_eps, model.schedule, x, cfg.omega, cfg.solver_steps, rngs
            )
    return x


def perturb(model: DenoiserModel, x: FieldState, cfg: GuidanceConfig, seed: int) -> FieldState:
    """Perturbed variant of a normalized state; forcings pass through."""
    if x.vars != model.n_vars:
        raise ValueError("state variable count does not match the model")
    out = perturb_batch(model, x.physical[None], cfg, [seed])[0]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("perturbation produced non-finite values")
    return x.with_physical(out)


def train_diffusion(
    dataset,
    forecaster: ForecasterModel | None,
    schedule: NoiseSchedule | None = None,
    spec: NetSpec | None = None,
    epochs: int = 60,
    batch_size: int = 32,
    lr: float = 2e-4,
    tau: float = 1.0,
    cond_prob: float = 0.9,
    seed: int = 0,
):
    """Train the conditional denoiser; returns (model, log).

    Per sample and epoch: with probability 1/2 the sample is advanced
    one step through the forecaster (so the denoiser also sees the
    forecast distribution it will perturb at inference); a timestep is
    drawn uniformly from [1, T]; the conditioning slab (the clean
    sample itself) is kept with probability cond_prob, otherwise the
    null condition is used.  Loss is mean squared error per element
    between drawn and predicted noise.
    """
    if len(dataset) == 0:
        raise ValueError("no training samples")
    if not 0.0 <= cond_prob <= 1.0:
        raise ValueError("cond_prob must lie in [0, 1]")
    if epochs < 0 or batch_size < 1:
        raise ValueError("bad epochs or batch size")
    first = dataset[0]
    if schedule is None:
        schedule = NoiseSchedule.linear()
    if spec is None:
        spec = default_denoiser_spec(first.vars)
    if spec.temb_width <= 0:
        raise ValueError("denoiser network needs a timestep embedding")
    v = first.vars
    full = np.stack([s.data for s in dataset]).astype(np.float32)  # (n, v+f, h, w)

    net = UNet(spec, init_seed=mix64(seed, 0))
    opt = Adam(net.store, lr=lr)
    draw = rng_for(seed, 1)
    log = TrainingLog()
    n = full.shape[0]
    for _ in range(epochs):
        perm = draw.permutation(n)
        sq_sum = 0.0
        el_sum = 0
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            b = len(idx)
            batch = full[idx]
            advance = draw.random(b) < 0.5
            x0 = batch[:, :v].astype(np.float64)
            if forecaster is not None and advance.any():
                x0[advance] = forecaster.predict_batch(batch[advance])
            log.n_advanced += int(advance.sum()) if forecaster is not None else 0
            t = draw.integers(1, schedule.t_steps + 1, size=b)
            eps = draw.standard_normal(x0.shape)
            xt = forward_noise(x0, t, eps, schedule)
            keep = draw.random(b) < cond_prob
            cond = np.where(keep[:, None, None, None], x0, 0.0)
            ind = np.broadcast_to(
                keep[:, None, None, None], (b, 1, x0.shape[2], x0.shape[3])
            ).astype(np.float64)
            log.n_conditioned += int(keep.sum())
            log.n_unconditioned += b - int(keep.sum())
            inp = np.concatenate([xt, cond, ind], axis=1).astype(np.float32)

            net.store.zero_grad()
            out = net.forward(inp, t)
            diff = engine.sub(out, engine.constant(eps.astype(np.float32)))
            loss = engine.mean_all(engine.mul(diff, diff))
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise RuntimeError(f"training diverged at step {log.n_steps}: loss={lval}")
            loss.backward()
            opt.clip_and_step(tau)
            sq_sum += lval * out.data.size
            el_sum += out.data.size
            log.n_steps += 1
            log.n_samples += b
        log.losses.append(sq_sum / el_sum)
    stats = forecaster.stats if forecaster is not None else NormStats(
        mu=(0.0,) * v, sigma=(1.0,) * v
    )
    return DenoiserModel(net, schedule, stats, step_count=log.n_steps), log


def save_denoiser(path, model: DenoiserModel) -> None:
    extra = {
        "kind": "denoiser",
        "stats": model.stats.to_dict(),
        "schedule": model.schedule.to_dict(),
    }
    save_checkpoint(path, model.net, step=model.step_count, extra=extra)


def load_denoiser(path) -> DenoiserModel:
    net, step_count, extra = load_checkpoint(path)
    if extra.get("kind") != "denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    return DenoiserModel(
        net,
        NoiseSchedule.from_dict(extra["schedule"]),
        NormStats.from_dict(extra["stats"]),
        step_count=step_count,
    )
