"""Command-line pipeline driver.

Subcommands cover the whole experiment loop: generate-data,
train-forecaster, train-diffusion, rollout, perturb, evaluate, sweep.
Every subcommand writes a config-echo JSON (the exact arguments plus a
hash) next to its primary output, so any artifact can be regenerated
from its echo and the input files.  Failures print a machine-readable
JSON error on stderr and exit nonzero; bad usage exits with code 2.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import diffusion, dynamics, ensemble, forecaster, grid, metrics
from .nn import NetSpec


def _csv_floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip() != ""]


def _csv_ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _echo_config(primary_out, command: str, args: dict) -> None:
    """Write the exact invocation next to the artifact it produced."""
    payload = {"command": command, "args": args}
    blob = json.dumps(payload, sort_keys=True)
    payload["config_hash"] = hashlib.sha256(blob.encode()).hexdigest()
    with open(f"{primary_out}.config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_curve(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            wr.writerow([i + 1, f"{v:.10g}"])


def _load_data_config(data_path) -> dict:
    echo = f"{data_path}.config.json"
    if os.path.exists(echo):
        with open(echo) as fh:
            return json.load(fh).get("args", {})
    return {}


def _forcing_spec_for(data_path, v, f, h, w, period_day, period_year) -> dynamics.ForcingSpec:
    """Periods come from flags or from the data file's config echo."""
    if period_day is None or period_year is None:
        cfg = _load_data_config(data_path)
        if period_day is None:
            period_day = cfg.get("period_day")
        if period_year is None:
            period_year = cfg.get("period_year")
    if period_day is None or period_year is None:
        raise ValueError(
            "forcing periods unknown: pass --period-day/--period-year or keep the "
            "data file's config echo next to it"
        )
    return dynamics.ForcingSpec(f, h, w, int(period_day), int(period_year))


def _guidance_from(ns) -> diffusion.GuidanceConfig:
    return diffusion.GuidanceConfig(
        omega=ns.omega,
        walks=ns.walks,
        solver=ns.solver,
        solver_steps=ns.solver_steps,
        ancestral_steps=getattr(ns, "ancestral_steps", None),
    )


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_generate_data(ns) -> int:
    cfg = dynamics.DynamicsConfig(
        vars=ns.vars,
        forcings=ns.forcings,
        height=ns.height,
        width=ns.width,
        velocity=tuple(_csv_floats(ns.velocity)),
        kappa=tuple(_csv_floats(ns.kappa)) if ns.kappa else None,
        period_day=ns.period_day,
        period_year=ns.period_year,
        source_amplitude=ns.source_amplitude,
    )
    states = dynamics.generate_trajectory(cfg, ns.steps, seed=ns.seed)
    grid.write_dataset(ns.out, states)
    _echo_config(ns.out, "generate-data", _args_dict(ns))
    print(f"wrote {ns.steps} states to {ns.out}")
    return 0


def _cmd_train_forecaster(ns) -> int:
    data = grid.read_dataset(ns.data)
    stats = grid.compute_stats(data)
    norm = [grid.normalize(s, stats) for s in data]
    pairs = grid.make_windows(norm)
    first = data[0]
    fspec = _forcing_spec_for(
        ns.data, first.vars, first.forcings, first.height, first.width,
        ns.period_day, ns.period_year,
    )
    spec = NetSpec(
        in_channels=first.vars + first.forcings,
        out_channels=first.vars,
        stages=((ns.base_width, True), (2 * ns.base_width, True)),
        temb_width=0,
        attention=not ns.no_attention,
    )
    model, log = forecaster.train_forecaster(
        pairs, stats, fspec, spec=spec, epochs=ns.epochs, batch_size=ns.batch,
        lr=ns.lr, tau=ns.tau, seed=ns.seed,
    )
    forecaster.save_forecaster(ns.out, model)
    if ns.stats_out:
        stats.save(ns.stats_out)
    if ns.curve_out:
        _write_curve(ns.curve_out, log.losses)
    _echo_config(ns.out, "train-forecaster", _args_dict(ns))
    final = log.losses[-1] if log.losses else float("nan")
    print(f"trained forecaster on {len(pairs)} pairs, final loss {final:.6g} -> {ns.out}")
    return 0


def _cmd_train_diffusion(ns) -> int:
    data = grid.read_dataset(ns.data)
    fmodel = forecaster.load_forecaster(ns.forecaster)
    norm = [grid.normalize(s, fmodel.stats) for s in data]
    first = data[0]
    schedule = diffusion.NoiseSchedule.linear(ns.t_steps, ns.beta_start, ns.beta_end)
    spec = NetSpec(
        in_channels=2 * first.vars + 1,
        out_channels=first.vars,
        stages=((ns.base_width, True), (2 * ns.base_width, True)),
        temb_width=ns.temb_width,
        attention=not ns.no_attention,
    )
    model, log = diffusion.train_diffusion(
        norm, fmodel, schedule=schedule, spec=spec, epochs=ns.epochs,
        batch_size=ns.batch, lr=ns.lr, tau=ns.tau, cond_prob=ns.cond_prob, seed=ns.seed,
    )
    diffusion.save_denoiser(ns.out, model)
    if ns.curve_out:
        _write_curve(ns.curve_out, log.losses)
    _echo_config(ns.out, "train-diffusion", _args_dict(ns))
    final = log.losses[-1] if log.losses else float("nan")
    print(
        f"trained denoiser on {len(norm)} states "
        f"(conditioned {log.n_conditioned}/{log.n_conditioned + log.n_unconditioned}), "
        f"final loss {final:.6g} -> {ns.out}"
    )
    return 0


def _run_once(ns, fmodel, dmodel, start, master_seed) -> ensemble.EnsembleRun:
    data = grid.read_dataset(ns.data)
    if not 0 <= start < len(data):
        raise ValueError(f"start index {start} outside dataset of {len(data)} states")
    x0 = grid.normalize(data[start], fmodel.stats)
    gcfg = _guidance_from(ns) if dmodel is not None else None
    provenance = {
        "data": {"path": ns.data, "sha256": _sha256(ns.data)},
        "forecaster": {"path": ns.forecaster, "sha256": _sha256(ns.forecaster)},
    }
    if dmodel is not None:
        provenance["denoiser"] = {"path": ns.denoiser, "sha256": _sha256(ns.denoiser)}
    return ensemble.run_ensemble(
        x0, fmodel, dmodel, ns.members, ns.lead, gcfg, master_seed,
        provenance=provenance,
        perturb_first_only=getattr(ns, "perturb_first_only", False),
    )


def _cmd_rollout(ns) -> int:
    fmodel = forecaster.load_forecaster(ns.forecaster)
    dmodel = diffusion.load_denoiser(ns.denoiser) if ns.denoiser else None
    run = _run_once(ns, fmodel, dmodel, ns.start, ns.seed)
    ensemble.save_run(ns.out, run)
    _echo_config(ns.out, "rollout", _args_dict(ns))
    note = f", casualties {run.casualties}" if run.casualties else ""
    print(f"ran {run.n_members}/{run.requested_members} members x {run.lead_steps} leads{note} -> {ns.out}")
    return 0


def _cmd_perturb(ns) -> int:
    dmodel = diffusion.load_denoiser(ns.denoiser)
    data = grid.read_dataset(ns.data)
    if not 0 <= ns.index < len(data):
        raise ValueError(f"index {ns.index} outside dataset of {len(data)} states")
    x0 = grid.normalize(data[ns.index], dmodel.stats)
    out = diffusion.perturb(dmodel, x0, _guidance_from(ns), ns.seed)
    grid.write_dataset(ns.out, [grid.denormalize(out, dmodel.stats)])
    _echo_config(ns.out, "perturb", _args_dict(ns))
    print(f"perturbed state {ns.index} -> {ns.out}")
    return 0


def _cmd_evaluate(ns) -> int:
    run = ensemble.load_run(ns.run)
    truth = grid.read_dataset(ns.truth)
    leads = _csv_ints(ns.leads) if ns.leads else list(range(1, run.lead_steps + 1))
    card = metrics.scorecard(run, truth, leads)
    card.write_csv(ns.out)
    stem, ext = os.path.splitext(ns.out)
    domain_path = f"{stem}_domain{ext or '.csv'}"
    metrics.write_domain_table(domain_path, metrics.domain_average_table(run, truth))
    _echo_config(ns.out, "evaluate", _args_dict(ns))
    print(f"scored {len(card.rows)} (variable, lead) cells [{card.label}] -> {ns.out}")
    return 0


def _cmd_sweep(ns) -> int:
    fmodel = forecaster.load_forecaster(ns.forecaster)
    dmodel = diffusion.load_denoiser(ns.denoiser)
    truth = grid.read_dataset(ns.data)
    omegas = _csv_floats(ns.omegas)
    walks_list = _csv_ints(ns.walks_list)
    leads = _csv_ints(ns.leads) if ns.leads else [ns.lead]
    os.makedirs(ns.out_dir, exist_ok=True)
    merged = []
    for omega in omegas:
        for walks in walks_list:
            cell = argparse.Namespace(**vars(ns))
            cell.omega, cell.walks = omega, walks
            run = _run_once(cell, fmodel, dmodel, ns.start, ns.seed)
            tag = f"omega{omega:g}_walks{walks}"
            cell_dir = os.path.join(ns.out_dir, tag)
            os.makedirs(cell_dir, exist_ok=True)
            run_path = os.path.join(cell_dir, "run.def1")
            ensemble.save_run(run_path, run)
            card = metrics.scorecard(run, truth, leads)
            card.write_csv(os.path.join(cell_dir, "scorecard.csv"))
            for row in card.rows:
                merged.append({"config": card.label, **row})
            print(f"sweep cell {tag}: {run.n_members}/{run.requested_members} members")
    out_csv = os.path.join(ns.out_dir, "comparison.csv")
    with open(out_csv, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["config"] + metrics.CSV_COLUMNS)
        for row in merged:
            wr.writerow([row["config"]] + [metrics._fmt(row[c]) for c in metrics.CSV_COLUMNS])
    _echo_config(out_csv, "sweep", _args_dict(ns))
    print(f"swept {len(omegas)}x{len(walks_list)} configs -> {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _args_dict(ns) -> dict:
    d = {k: v for k, v in vars(ns).items() if k != "func"}
    return d


def _add_gen(sub):
    p = sub.add_parser("generate-data", help="simulate a truth trajectory")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vars", type=int, default=4)
    p.add_argument("--forcings", type=int, default=4)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--velocity", default="0.5,0.25", help="vx,vy in cells/step")
    p.add_argument("--kappa", default="", help="per-variable diffusivities, comma separated")
    p.add_argument("--period-day", type=int, default=4)
    p.add_argument("--period-year", type=int, default=128)
    p.add_argument("--source-amplitude", type=float, default=0.05)
    p.set_defaults(func=_cmd_generate_data)


def _add_train_forecaster(sub):
    p = sub.add_parser("train-forecaster", help="fit the deterministic one-step model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", "--ckpt", dest="out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--period-day", type=int, default=None)
    p.add_argument("--period-year", type=int, default=None)
    p.add_argument("--stats-out", default="")
    p.add_argument("--curve-out", default="")
    p.set_defaults(func=_cmd_train_forecaster)


def _add_train_diffusion(sub):
    p = sub.add_parser("train-diffusion", help="fit the conditional denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--forecaster", "--ckpt-f", dest="forecaster", required=True)
    p.add_argument("--out", "--ckpt", dest="out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--cond-prob", type=float, default=0.9)
    p.add_argument("--t-steps", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--temb-width", type=int, default=32)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--curve-out", default="")
    p.set_defaults(func=_cmd_train_diffusion)


def _sampling_args(p, with_members=True):
    p.add_argument("--omega", type=float, default=0.5)
    p.add_argument("--walks", type=int, default=1)
    p.add_argument("--solver", choices=("ancestral", "dpm2m"), default="dpm2m")
    p.add_argument("--solver-steps", "--steps", dest="solver_steps", type=int, default=20)
    p.add_argument(
        "--ancestral-steps", type=int, default=None,
        help="coarsen the ancestral chain to this many transitions (default: full)",
    )
    p.add_argument("--seed", type=int, default=0)
    if with_members:
        p.add_argument("--members", type=int, default=16)
        p.add_argument("--lead", type=int, default=40)
        p.add_argument("--start", type=int, default=0)
        p.add_argument(
            "--perturb-first-only", action="store_true",
            help="perturb only before the first advance instead of before every one",
        )


def _add_rollout(sub):
    p = sub.add_parser("rollout", help="run an ensemble forecast")
    p.add_argument("--data", required=True)
    p.add_argument("--forecaster", "--ckpt-f", dest="forecaster", required=True)
    p.add_argument(
        "--denoiser", "--ckpt-d", dest="denoiser", default="",
        help="omit for an unperturbed run",
    )
    p.add_argument("--out", required=True)
    _sampling_args(p)
    p.set_defaults(func=_cmd_rollout)


def _add_perturb(sub):
    p = sub.add_parser("perturb", help="draw one perturbed variant of a state")
    p.add_argument("--data", required=True)
    p.add_argument("--denoiser", "--ckpt", dest="denoiser", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    _sampling_args(p, with_members=False)
    p.set_defaults(func=_cmd_perturb)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="score a run against truth")
    p.add_argument("--run", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--leads", default="", help="comma separated; default all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="grid of guidance configs, merged comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--forecaster", "--ckpt-f", dest="forecaster", required=True)
    p.add_argument("--denoiser", "--ckpt-d", dest="denoiser", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--omegas", "--omega", dest="omegas", default="0.3,0.5,0.7,1.0")
    p.add_argument("--walks-list", "--walks", dest="walks_list", default="1")
    p.add_argument("--leads", default="")
    p.add_argument("--solver", choices=("ancestral", "dpm2m"), default="dpm2m")
    p.add_argument("--solver-steps", type=int, default=20)
    p.add_argument(
        "--ancestral-steps", type=int, default=None,
        help="coarsen the ancestral chain to this many transitions (default: full)",
    )
    p.add_argument("--members", type=int, default=16)
    p.add_argument("--lead", type=int, default=40)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--perturb-first-only", action="store_true",
        help="perturb only before the first advance instead of before every one",
    )
    p.set_defaults(func=_cmd_sweep)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="def", description="diffusion-perturbed ensemble forecasting pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen(sub)
    _add_train_forecaster(sub)
    _add_train_diffusion(sub)
    _add_rollout(sub)
    _add_perturb(sub)
    _add_evaluate(sub)
    _add_sweep(sub)
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit nonzero
        print(
            json.dumps({"error": str(exc), "type": type(exc).__name__}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
