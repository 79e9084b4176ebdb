"""Shared test utilities: brute-force oracles and numeric checks."""

from __future__ import annotations

import numpy as np

from diffens.grid import FieldState


def field(vars=1, forcings=0, height=2, width=2, fill=0.0, time_index=0):
    """Small FieldState with constant payload."""
    data = np.full((vars + forcings, height, width), float(fill))
    return FieldState(vars, forcings, height, width, data, time_index)


def field_from(phys, forcings=0, time_index=0, forcing_fill=0.0):
    """FieldState from an explicit (v, h, w) physical slab."""
    phys = np.asarray(phys, dtype=np.float64)
    v, h, w = phys.shape
    if forcings:
        forc = np.full((forcings, h, w), float(forcing_fill))
        data = np.concatenate([phys, forc], axis=0)
    else:
        data = phys
    return FieldState(v, forcings, h, w, data, time_index)


def random_field(rng, vars=2, forcings=1, height=4, width=4, time_index=0):
    data = rng.standard_normal((vars + forcings, height, width))
    return FieldState(vars, forcings, height, width, data, time_index)


# ---------------------------------------------------------------------------
# brute-force metric oracles (plain double loops, scalar arithmetic)
# ---------------------------------------------------------------------------


def crps_bruteforce(members, obs) -> float:
    members = np.asarray(members, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    b = members.shape[0]
    flat = members.reshape(b, -1)
    o = obs.reshape(-1)
    total = 0.0
    for p in range(o.size):
        t1 = sum(abs(flat[i, p] - o[p]) for i in range(b)) / b
        t2 = sum(
            abs(flat[i, p] - flat[j, p]) for i in range(b) for j in range(b)
        ) / (2.0 * b * b)
        total += t1 - t2
    return total / o.size


def energy_bruteforce(members, obs) -> float:
    members = np.asarray(members, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    b = members.shape[0]
    flat = members.reshape(b, -1)
    o = obs.reshape(-1)
    t1 = sum(float(np.sqrt(((flat[i] - o) ** 2).sum())) for i in range(b)) / b
    t2 = sum(
        float(np.sqrt(((flat[i] - flat[j]) ** 2).sum()))
        for i in range(b)
        for j in range(b)
    ) / (2.0 * b * b)
    return t1 - t2


def exact_score_eps_fn(schedule):
    """Noise predictor that is exact when the clean data is N(0, I).

    For x0, eps ~ N(0, I) and z = sqrt(abar) x0 + sqrt(1-abar) eps the
    posterior mean of eps given z is sqrt(1-abar) * z, so a sampler fed
    this predictor must reproduce a standard normal.
    """
    root = np.sqrt(1.0 - schedule.alpha_bars)

    def eps_fn(z, t, cond):
        s = root[np.asarray(t)]
        if s.ndim == 1:
            s = s.reshape((-1,) + (1,) * (z.ndim - 1))
        return s * z

    return eps_fn


def rank_corr(xs, ys) -> float:
    """Spearman rank correlation; assumes no ties among the inputs."""
    rx = np.argsort(np.argsort(np.asarray(xs))).astype(np.float64)
    ry = np.argsort(np.argsort(np.asarray(ys))).astype(np.float64)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


def gradcheck_worst_rel(net, x, t=None, h=1e-4, upstream_seed=0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Probes every parameter of the network against the scalar loss
    sum(output * fixed_upstream), whose gradient is exactly the
    backward pass with that upstream.
    """
    rng = np.random.default_rng(upstream_seed)
    out = net.forward(x, t)
    upstream = rng.standard_normal(out.data.shape)
    net.store.zero_grad()
    net.backward(upstream)
    analytic = net.store.grads.copy()
    params = net.store.params
    worst = 0.0
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + h
        fp = float((net.predict(x, t) * upstream).sum())
        params[i] = orig - h
        fm = float((net.predict(x, t) * upstream).sum())
        params[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        scale = max(abs(numeric), abs(float(analytic[i])), 1e-6)
        worst = max(worst, abs(numeric - float(analytic[i])) / scale)
    return worst
