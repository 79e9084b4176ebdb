"""Ensemble forecast engine.

Each member starts from the same analysis state; before every forecast
step its physical channels are re-drawn from the diffusion model
conditioned on the member's current state, then advanced one step with
the deterministic forecaster.  Member b's noise at lead step i, walk k
comes from the generator seeded with mix64(mix64(mix64(master, b), i), k),
so runs are reproducible bit for bit and independent of batching.

Members whose state turns non-finite are recorded as casualties and
excluded; the run continues with the survivors.  Stored trajectories
are in denormalized physical units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DenoiserModel, GuidanceConfig, perturb_batch
from .dynamics import forcing_channels
from .forecaster import ForecasterModel
from .grid import FieldState, denormalize_array, read_raw, write_dataset
from .seeding import mix64


@dataclass
class EnsembleRun:
    """Completed run: surviving member trajectories plus the
    deterministic baseline, all in physical units."""

    members: list  # list over members of list[FieldState], length lead_steps
    baseline: list  # list[FieldState], length lead_steps
    t0: int
    lead_steps: int
    requested_members: int
    surviving: list  # original member indices, parallel to members
    member_seeds: list  # seed per requested member
    casualties: list  # (member_index, lead_step) pairs
    master_seed: int
    guidance: GuidanceConfig | None
    perturb_first_only: bool = False
    provenance: dict = field(default_factory=dict)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def _check_lead(self, lead: int) -> None:
        if not 1 <= lead <= self.lead_steps:
            raise ValueError(f"lead must lie in [1, {self.lead_steps}]")

    def member_physical(self, lead: int) -> np.ndarray:
        """Physical slabs of all surviving members at a lead, (B, v, h, w)."""
        self._check_lead(lead)
        if not self.members:
            raise ValueError("run has no surviving members")
        return np.stack([m[lead - 1].physical for m in self.members])

    def baseline_state(self, lead: int) -> FieldState:
        self._check_lead(lead)
        return self.baseline[lead - 1]


def ensemble_mean(run: EnsembleRun, lead: int) -> FieldState:
    """Member-mean state at a lead time (physical units)."""
    mean = run.member_physical(lead).mean(axis=0)
    template = run.members[0][lead - 1]
    return template.with_physical(mean)


def ensemble_spread(run: EnsembleRun, lead: int) -> np.ndarray:
    """Per-pixel population std over members at a lead, shape (v, h, w)."""
    return run.member_physical(lead).std(axis=0)


def run_ensemble(
    x0: FieldState,
    forecaster: ForecasterModel,
    denoiser: DenoiserModel | None,
    n_members: int,
    lead_steps: int,
    cfg: GuidanceConfig | None,
    master_seed: int,
    provenance: dict | None = None,
    perturb_first_only: bool = False,
) -> EnsembleRun:
    """Run an ensemble from a normalized analysis state.

    `denoiser=None` (or cfg=None) disables perturbation, making every
    member identical to the deterministic baseline; with one member
    this reproduces the plain forecaster rollout exactly.

    By default each member is re-perturbed before every advance; the
    `perturb_first_only` ablation perturbs only before the first one, so
    all later divergence comes from the dynamics alone.
    """
    if n_members < 1 or lead_steps < 1:
        raise ValueError("need at least one member and one lead step")
    if denoiser is not None:
        if cfg is None:
            raise ValueError("a guidance config is required when perturbing")
        if denoiser.n_vars != forecaster.n_vars:
            raise ValueError("denoiser and forecaster disagree on variable count")
        if denoiser.stats != forecaster.stats:
            raise ValueError("denoiser and forecaster were built with different statistics")
    fs = forecaster.forcing
    if (x0.vars, x0.forcings, x0.height, x0.width) != (
        forecaster.n_vars,
        fs.forcings,
        fs.height,
        fs.width,
    ):
        raise ValueError("analysis state shape does not match the forecaster")

    b = n_members
    v, h, w = x0.vars, x0.height, x0.width
    t0 = x0.time_index
    stats = forecaster.stats
    member_seeds = [mix64(master_seed, m) for m in range(b)]

    phys = np.repeat(x0.physical[None], b, axis=0)
    base = x0.physical[None].copy()
    alive = np.ones(b, dtype=bool)
    casualties: list = []
    member_traj = np.full((b, lead_steps, v, h, w), np.nan)
    base_traj = np.empty((lead_steps, v, h, w))

    for i in range(lead_steps):
        t_now = t0 + i
        idx = np.flatnonzero(alive)
        if denoiser is not None and idx.size and not (perturb_first_only and i > 0):
            seeds = [mix64(member_seeds[m], i + 1) for m in idx]
            phys[idx] = perturb_batch(denoiser, phys[idx], cfg, seeds)
            bad = idx[~np.isfinite(phys[idx]).all(axis=(1, 2, 3))]
            for m in bad:
                casualties.append((int(m), i + 1))
                alive[m] = False
            idx = np.flatnonzero(alive)
        forc = forcing_channels(t_now, fs)
        if idx.size:
            inp = np.concatenate(
                [phys[idx], np.repeat(forc[None], idx.size, axis=0)], axis=1
            ).astype(np.float32)
            phys[idx] = forecaster.predict_batch(inp)
            bad = idx[~np.isfinite(phys[idx]).all(axis=(1, 2, 3))]
            for m in bad:
                casualties.append((int(m), i + 1))
                alive[m] = False
            member_traj[alive, i] = phys[alive]
        base = forecaster.predict_batch(
            np.concatenate([base, forc[None]], axis=1).astype(np.float32)
        )
        if not np.isfinite(base).all():
            raise FloatingPointError(f"deterministic baseline diverged at lead {i + 1}")
        base_traj[i] = base[0]

    def to_states(traj: np.ndarray) -> list:
        out = []
        for i in range(lead_steps):
            t_i = t0 + i + 1
            data = np.concatenate(
                [denormalize_array(traj[i], stats), forcing_channels(t_i, fs)], axis=0
            )
            out.append(FieldState(v, x0.forcings, h, w, data, t_i))
        return out

    surviving = [int(m) for m in np.flatnonzero(alive)]
    members = [to_states(member_traj[m]) for m in surviving]
    run = EnsembleRun(
        members=members,
        baseline=to_states(base_traj),
        t0=t0,
        lead_steps=lead_steps,
        requested_members=b,
        surviving=surviving,
        member_seeds=member_seeds,
        casualties=casualties,
        master_seed=int(master_seed),
        guidance=cfg if denoiser is not None else None,
        perturb_first_only=perturb_first_only,
        provenance=provenance or {},
    )
    return run


# ---------------------------------------------------------------------------
# run container: baseline then members concatenated into one field file,
# bookkeeping in a JSON sidecar next to it
# ---------------------------------------------------------------------------


def _sidecar(path) -> str:
    return f"{path}.json"


def save_run(path, run: EnsembleRun) -> None:
    states = list(run.baseline)
    for traj in run.members:
        states.extend(traj)
    write_dataset(path, states)
    g = run.guidance
    meta = {
        "t0": run.t0,
        "lead_steps": run.lead_steps,
        "requested_members": run.requested_members,
        "surviving": run.surviving,
        "member_seeds": run.member_seeds,
        "casualties": [[int(m), int(s)] for m, s in run.casualties],
        "master_seed": run.master_seed,
        "perturb_first_only": run.perturb_first_only,
        "guidance": None
        if g is None
        else {
            "omega": g.omega,
            "walks": g.walks,
            "solver": g.solver,
            "solver_steps": g.solver_steps,
            "ancestral_steps": g.ancestral_steps,
        },
        "provenance": run.provenance,
    }
    with open(_sidecar(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_run(path) -> EnsembleRun:
    with open(_sidecar(path)) as fh:
        meta = json.load(fh)
    v, f, h, w, arr = read_raw(path)
    n = meta["lead_steps"]
    n_members = len(meta["surviving"])
    if arr.shape[0] != (1 + n_members) * n:
        raise ValueError(f"{path}: state count does not match sidecar")

    def to_states(block: np.ndarray) -> list:
        return [
            FieldState(v, f, h, w, block[i], meta["t0"] + i + 1) for i in range(n)
        ]

    baseline = to_states(arr[:n])
    members = [to_states(arr[(1 + m) * n : (2 + m) * n]) for m in range(n_members)]
    g = meta["guidance"]
    return EnsembleRun(
        members=members,
        baseline=baseline,
        t0=int(meta["t0"]),
        lead_steps=n,
        requested_members=int(meta["requested_members"]),
        surviving=[int(m) for m in meta["surviving"]],
        member_seeds=[int(s) for s in meta["member_seeds"]],
        casualties=[(int(m), int(s)) for m, s in meta["casualties"]],
        master_seed=int(meta["master_seed"]),
        guidance=None if g is None else GuidanceConfig(**g),
        perturb_first_only=bool(meta.get("perturb_first_only", False)),
        provenance=meta.get("provenance", {}),
    )
