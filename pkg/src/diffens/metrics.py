"""Probabilistic verification metrics and scorecards.

CRPS and the energy score use the standard ensemble estimators

    CRPS = mean_b |x_b - y| - 1/(2 B^2) sum_bb' |x_b - x_b'|   (pointwise,
           then averaged over grid points)
    ES   = mean_b ||x_b - y|| - 1/(2 B^2) sum_bb' ||x_b - x_b'||

with Euclidean norms over the flattened field.  Spread correlation is
the L2 distance between the absolute-error field of a forecast and the
per-pixel ensemble spread: 0 means spread matches error magnitude
everywhere.  All scores are computed per variable in physical units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ensemble import EnsembleRun, ensemble_mean, ensemble_spread
from .grid import FieldState

CSV_COLUMNS = ["variable", "lead", "energy", "crps", "rmse", "spread_corr",
               "det_rmse", "spread"]


def _members_array(members) -> np.ndarray:
    arr = np.asarray(members, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[0] < 1:
        raise ValueError("need at least one ensemble member")
    return arr


def crps(members, obs) -> float:
    """Continuous ranked probability score, averaged over grid points."""
    m = _members_array(members)
    o = np.asarray(obs, dtype=np.float64)
    if m.shape[1:] != o.shape:
        raise ValueError(f"members {m.shape} do not match observation {o.shape}")
    b = m.shape[0]
    term1 = np.abs(m - o).mean(axis=0)
    term2 = np.abs(m[:, None] - m[None, :]).sum(axis=(0, 1)) / (2.0 * b * b)
    return float((term1 - term2).mean())


def energy_score(members, obs) -> float:
    """Multivariate generalization of CRPS over the flattened field."""
    m = _members_array(members)
    o = np.asarray(obs, dtype=np.float64)
    if m.shape[1:] != o.shape:
        raise ValueError(f"members {m.shape} do not match observation {o.shape}")
    b = m.shape[0]
    flat = m.reshape(b, -1)
    term1 = np.linalg.norm(flat - o.reshape(-1), axis=1).mean()
    pair = np.linalg.norm(flat[:, None] - flat[None, :], axis=2).sum()
    return float(term1 - pair / (2.0 * b * b))


def rmse(forecast, obs) -> float:
    a = np.asarray(forecast, dtype=np.float64)
    o = np.asarray(obs, dtype=np.float64)
    if a.shape != o.shape:
        raise ValueError("forecast and observation shapes differ")
    return float(np.sqrt(((a - o) ** 2).mean()))


def spread_correlation(members, obs, forecast=None) -> float:
    """L2 mismatch between absolute error and ensemble spread fields."""
    m = _members_array(members)
    o = np.asarray(obs, dtype=np.float64)
    if m.shape[1:] != o.shape:
        raise ValueError(f"members {m.shape} do not match observation {o.shape}")
    f = m.mean(axis=0) if forecast is None else np.asarray(forecast, dtype=np.float64)
    if f.shape != o.shape:
        raise ValueError("forecast and observation shapes differ")
    err = np.abs(f - o)
    spread = m.std(axis=0)
    return float(np.linalg.norm((err - spread).ravel()))


def domain_average(f) -> float:
    return float(np.asarray(f, dtype=np.float64).mean())


@dataclass
class ScoreCard:
    """Per-(variable, lead) scores for one ensemble configuration."""

    label: str
    rows: list  # dicts with CSV_COLUMNS keys

    def __post_init__(self):
        for r in self.rows:
            vals = [r[c] for c in CSV_COLUMNS[2:]]
            if not all(np.isfinite(v) for v in vals):
                raise ValueError(f"non-finite score in row {r}")
            if any(v < 0 for v in vals):
                raise ValueError(f"negative score in row {r}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(CSV_COLUMNS)
            for r in self.rows:
                wr.writerow([_fmt(r[c]) for c in CSV_COLUMNS])

    def value(self, variable: str, lead: int, column: str) -> float:
        for r in self.rows:
            if r["variable"] == variable and r["lead"] == lead:
                return r[column]
        raise KeyError(f"no row for ({variable}, {lead})")


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else v


def _truth_by_time(truth: Sequence[FieldState]) -> dict:
    return {s.time_index: s for s in truth}


def scorecard(run: EnsembleRun, truth: Sequence[FieldState], leads) -> ScoreCard:
    """Scores per variable and lead against a truth trajectory.

    Truth states are matched by time index; every requested lead must
    be covered by the run and the truth.
    """
    if run.n_members < 1:
        raise ValueError("run has no surviving members")
    lookup = _truth_by_time(truth)
    g = run.guidance
    label = "Deterministic" if g is None else f"Diffusion[{g.omega:g}, {g.walks}]"
    rows = []
    for lead in leads:
        lead = int(lead)
        t_target = run.t0 + lead
        if t_target not in lookup:
            raise ValueError(f"truth trajectory does not cover time index {t_target}")
        obs = lookup[t_target]
        members = run.member_physical(lead)  # (B, v, h, w)
        mean = members.mean(axis=0)
        spread = ensemble_spread(run, lead)
        det = run.baseline_state(lead)
        for vi in range(obs.vars):
            o = obs.physical[vi]
            rows.append(
                {
                    "variable": f"var{vi}",
                    "lead": lead,
                    "energy": energy_score(members[:, vi], o),
                    "crps": crps(members[:, vi], o),
                    "rmse": rmse(mean[vi], o),
                    "spread_corr": spread_correlation(members[:, vi], o, forecast=mean[vi]),
                    "det_rmse": rmse(det.physical[vi], o),
                    "spread": domain_average(spread[vi]),
                }
            )
    return ScoreCard(label=label, rows=rows)


def domain_average_table(run: EnsembleRun, truth: Sequence[FieldState]) -> list:
    """Domain means per lead, variable, and source, for conservation checks.

    Sources: truth, deterministic, ensemble_mean, and each member.
    """
    lookup = _truth_by_time(truth)
    rows = []
    for lead in range(1, run.lead_steps + 1):
        t_target = run.t0 + lead
        obs = lookup.get(t_target)
        mean = ensemble_mean(run, lead)
        for vi in range(mean.vars):
            var = f"var{vi}"
            if obs is not None:
                rows.append((lead, var, "truth", domain_average(obs.physical[vi])))
            rows.append(
                (lead, var, "deterministic",
                 domain_average(run.baseline_state(lead).physical[vi]))
            )
            rows.append((lead, var, "ensemble_mean", domain_average(mean.physical[vi])))
            for m, traj in zip(run.surviving, run.members):
                rows.append(
                    (lead, var, f"member_{m:03d}",
                     domain_average(traj[lead - 1].physical[vi]))
                )
    return rows


def write_domain_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lead", "variable", "source", "value"])
        for lead, var, src, val in rows:
            wr.writerow([lead, var, src, _fmt(float(val))])
