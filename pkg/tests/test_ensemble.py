"""Ensemble engine: reproducibility, member bookkeeping, persistence."""

import json

import numpy as np
import pytest

from diffens import ensemble as ens_mod
from diffens.diffusion import DenoiserModel, GuidanceConfig, perturb_batch
from diffens.ensemble import (
    EnsembleRun,
    ensemble_mean,
    ensemble_spread,
    load_run,
    run_ensemble,
    save_run,
)
from diffens.forecaster import rollout
from diffens.grid import FieldState, NormStats, denormalize_array
from diffens.metrics import rmse
from diffens.seeding import mix64

GCFG = GuidanceConfig(omega=0.5, walks=1, solver="dpm2m", solver_steps=20)


def tiny_run(vals, guidance=None, baseline_vals=None):
    """Synthetic run with scalar 1x1 fields; vals has shape (B, L)."""
    vals = np.asarray(vals, dtype=np.float64)
    b, n = vals.shape
    if baseline_vals is None:
        baseline_vals = np.zeros(n)

    def mk(x, t):
        return FieldState(1, 0, 1, 1, np.array([[[float(x)]]]), t)

    return EnsembleRun(
        members=[[mk(vals[m, i], i + 1) for i in range(n)] for m in range(b)],
        baseline=[mk(baseline_vals[i], i + 1) for i in range(n)],
        t0=0,
        lead_steps=n,
        requested_members=b,
        surviving=list(range(b)),
        member_seeds=[mix64(0, m) for m in range(b)],
        casualties=[],
        master_seed=0,
        guidance=guidance,
        perturb_first_only=False,
        provenance={},
    )


class TestMeanSpread:
    def test_worked_example(self):
        run = tiny_run([[1.0, 5.0], [3.0, 5.0]])
        assert ensemble_mean(run, 1).physical[0, 0, 0] == 2.0
        assert ensemble_mean(run, 2).physical[0, 0, 0] == 5.0
        assert ensemble_spread(run, 1)[0, 0, 0] == 1.0  # population std of {1, 3}
        assert ensemble_spread(run, 2)[0, 0, 0] == 0.0

    def test_single_member_spread_is_zero(self):
        run = tiny_run([[2.5, -1.0, 7.0]])
        for lead in (1, 2, 3):
            assert ensemble_spread(run, lead)[0, 0, 0] == 0.0
            assert ensemble_mean(run, lead).physical[0, 0, 0] == run.members[0][lead - 1].physical[0, 0, 0]

    def test_member_order_does_not_matter(self):
        rng = np.random.default_rng(4)
        run = tiny_run(rng.standard_normal((6, 3)))
        flipped = tiny_run(np.asarray([[s.physical[0, 0, 0] for s in m] for m in run.members])[::-1])
        for lead in (1, 3):
            np.testing.assert_allclose(
                ensemble_mean(flipped, lead).physical,
                ensemble_mean(run, lead).physical,
                rtol=1e-12,
            )
            np.testing.assert_allclose(
                ensemble_spread(flipped, lead), ensemble_spread(run, lead), rtol=1e-12
            )

    def test_mean_keeps_time_index_and_forcings(self):
        run = tiny_run([[1.0, 2.0], [3.0, 4.0]])
        mean = ensemble_mean(run, 2)
        assert mean.time_index == run.members[0][1].time_index

    def test_lead_bounds(self):
        run = tiny_run([[1.0, 2.0]])
        for lead in (0, 3, -1):
            with pytest.raises(ValueError, match="lead"):
                run.member_physical(lead)
            with pytest.raises(ValueError, match="lead"):
                run.baseline_state(lead)

    def test_no_survivors_rejected(self):
        run = tiny_run([[1.0]])
        run.members = []
        run.surviving = []
        with pytest.raises(ValueError, match="surviving"):
            run.member_physical(1)


class TestUnperturbedRuns:
    def test_single_member_reproduces_rollout(self, toy_system, toy_forecaster):
        x0 = toy_system.norm[toy_system.n_train]
        lead = 6
        run = run_ensemble(x0, toy_forecaster, None, 1, lead, None, master_seed=3)
        states = rollout(toy_forecaster, x0, lead)
        for i in range(lead):
            expect = denormalize_array(states[i].physical, toy_system.stats)
            np.testing.assert_array_equal(run.baseline_state(i + 1).physical, expect)
            np.testing.assert_array_equal(run.members[0][i].physical, expect)
            assert run.members[0][i].time_index == states[i].time_index

    def test_all_members_equal_baseline_without_denoiser(self, toy_system, toy_forecaster):
        x0 = toy_system.norm[toy_system.n_train]
        run = run_ensemble(x0, toy_forecaster, None, 3, 4, None, master_seed=0)
        for traj in run.members:
            for i, s in enumerate(traj):
                np.testing.assert_array_equal(s.physical, run.baseline_state(i + 1).physical)

    def test_guidance_dropped_without_denoiser(self, toy_system, toy_forecaster):
        x0 = toy_system.norm[toy_system.n_train]
        run = run_ensemble(x0, toy_forecaster, None, 1, 2, GCFG, master_seed=0)
        assert run.guidance is None


class TestPerturbedRuns:
    def test_same_master_seed_is_bitwise(self, toy_system, toy_forecaster, toy_denoiser):
        x0 = toy_system.norm[toy_system.n_train]
        a = run_ensemble(x0, toy_forecaster, toy_denoiser, 3, 3, GCFG, master_seed=11)
        b = run_ensemble(x0, toy_forecaster, toy_denoiser, 3, 3, GCFG, master_seed=11)
        for ta, tb in zip(a.members, b.members):
            for sa, sb in zip(ta, tb):
                np.testing.assert_array_equal(sa.data, sb.data)
        assert a.member_seeds == b.member_seeds

    def test_different_master_seed_differs(self, toy_system, toy_forecaster, toy_denoiser):
        x0 = toy_system.norm[toy_system.n_train]
        a = run_ensemble(x0, toy_forecaster, toy_denoiser, 1, 1, GCFG, master_seed=11)
        b = run_ensemble(x0, toy_forecaster, toy_denoiser, 1, 1, GCFG, master_seed=12)
        assert not np.array_equal(a.members[0][0].physical, b.members[0][0].physical)

    def test_members_do_not_collapse(self, toy_system, toy_forecaster, toy_denoiser):
        x0 = toy_system.norm[toy_system.n_train]
        run = run_ensemble(x0, toy_forecaster, toy_denoiser, 4, 3, GCFG, master_seed=7)
        final = run.member_physical(3)
        closest = min(
            rmse(final[i], final[j])
            for i in range(len(final))
            for j in range(i + 1, len(final))
        )
        assert closest > 0

    def test_members_independent_of_batch_composition(
        self, toy_system, toy_forecaster, toy_denoiser
    ):
        x0 = toy_system.norm[toy_system.n_train]
        small = run_ensemble(x0, toy_forecaster, toy_denoiser, 2, 2, GCFG, master_seed=9)
        large = run_ensemble(x0, toy_forecaster, toy_denoiser, 3, 2, GCFG, master_seed=9)
        for m in range(2):
            for i in range(2):
                np.testing.assert_array_equal(
                    small.members[m][i].physical, large.members[m][i].physical
                )

    def test_member_seeds_derive_from_master(self, toy_system, toy_forecaster, toy_denoiser):
        x0 = toy_system.norm[toy_system.n_train]
        run = run_ensemble(x0, toy_forecaster, toy_denoiser, 4, 1, GCFG, master_seed=21)
        assert run.member_seeds == [mix64(21, m) for m in range(4)]

    def test_baseline_is_not_perturbed(self, toy_system, toy_forecaster, toy_denoiser):
        x0 = toy_system.norm[toy_system.n_train]
        run = run_ensemble(x0, toy_forecaster, toy_denoiser, 2, 3, GCFG, master_seed=5)
        det = run_ensemble(x0, toy_forecaster, None, 1, 3, None, master_seed=99)
        for lead in (1, 2, 3):
            np.testing.assert_array_equal(
                run.baseline_state(lead).physical, det.baseline_state(lead).physical
            )
            assert not np.array_equal(
                run.members[0][lead - 1].physical, run.baseline_state(lead).physical
            )

    def test_perturb_first_only(self, toy_system, toy_forecaster, toy_denoiser):
        x0 = toy_system.norm[toy_system.n_train]
        full = run_ensemble(x0, toy_forecaster, toy_denoiser, 2, 3, GCFG, master_seed=13)
        once = run_ensemble(
            x0, toy_forecaster, toy_denoiser, 2, 3, GCFG, master_seed=13,
            perturb_first_only=True,
        )
        assert once.perturb_first_only
        for m in range(2):
            np.testing.assert_array_equal(
                once.members[m][0].physical, full.members[m][0].physical
            )
            assert not np.array_equal(
                once.members[m][2].physical, full.members[m][2].physical
            )
        # later divergence between the two ablation members comes from the
        # dynamics alone, so they stay distinct
        assert not np.array_equal(once.members[0][2].physical, once.members[1][2].physical)

    def test_validation(self, toy_system, toy_forecaster, toy_denoiser):
        x0 = toy_system.norm[toy_system.n_train]
        with pytest.raises(ValueError, match="at least one"):
            run_ensemble(x0, toy_forecaster, toy_denoiser, 0, 2, GCFG, master_seed=0)
        with pytest.raises(ValueError, match="at least one"):
            run_ensemble(x0, toy_forecaster, toy_denoiser, 2, 0, GCFG, master_seed=0)
        with pytest.raises(ValueError, match="guidance"):
            run_ensemble(x0, toy_forecaster, toy_denoiser, 1, 1, None, master_seed=0)
        other_stats = NormStats((0.0,) * x0.vars, (1.0,) * x0.vars)
        mismatched = DenoiserModel(toy_denoiser.net, toy_denoiser.schedule, other_stats)
        with pytest.raises(ValueError, match="statistics"):
            run_ensemble(x0, toy_forecaster, mismatched, 1, 1, GCFG, master_seed=0)
        bad_shape = FieldState(
            x0.vars, x0.forcings, x0.height, x0.width * 2,
            np.zeros((x0.vars + x0.forcings, x0.height, x0.width * 2)), 0,
        )
        with pytest.raises(ValueError, match="shape"):
            run_ensemble(bad_shape, toy_forecaster, toy_denoiser, 1, 1, GCFG, master_seed=0)


class TestCasualties:
    def test_nonfinite_member_is_dropped_and_logged(
        self, toy_system, toy_forecaster, toy_denoiser, monkeypatch
    ):
        x0 = toy_system.norm[toy_system.n_train]
        clean = run_ensemble(x0, toy_forecaster, toy_denoiser, 3, 3, GCFG, master_seed=17)
        calls = {"n": 0}

        def sabotaged(model, phys, cfg, seeds):
            out = perturb_batch(model, phys, cfg, seeds)
            calls["n"] += 1
            if calls["n"] == 2:  # lead step 2, member index 1 still alive
                out[1] = np.nan
            return out

        monkeypatch.setattr(ens_mod, "perturb_batch", sabotaged)
        run = run_ensemble(x0, toy_forecaster, toy_denoiser, 3, 3, GCFG, master_seed=17)
        assert run.casualties == [(1, 2)]
        assert run.surviving == [0, 2]
        assert run.requested_members == 3 and run.n_members == 2
        for traj in run.members:
            for s in traj:
                assert np.isfinite(s.data).all()
        # survivors are untouched by the casualty thanks to per-member seeding
        for got, orig in zip(run.members, [clean.members[0], clean.members[2]]):
            for sa, sb in zip(got, orig):
                np.testing.assert_array_equal(sa.physical, sb.physical)

    def test_diverged_baseline_raises(self, toy_system, toy_forecaster, monkeypatch):
        x0 = toy_system.norm[toy_system.n_train]
        monkeypatch.setattr(
            toy_forecaster, "predict_batch",
            lambda data: np.full((data.shape[0], x0.vars, x0.height, x0.width), np.nan),
        )
        with pytest.raises(FloatingPointError, match="baseline"):
            run_ensemble(x0, toy_forecaster, None, 1, 2, None, master_seed=0)


class TestPersistence:
    def test_round_trip(self, tmp_path, toy_system, toy_forecaster, toy_denoiser):
        x0 = toy_system.norm[toy_system.n_train]
        run = run_ensemble(
            x0, toy_forecaster, toy_denoiser, 3, 2, GCFG, master_seed=23,
            provenance={"analysis_time": int(x0.time_index), "note": "round-trip"},
        )
        path = tmp_path / "run.bin"
        save_run(path, run)
        back = load_run(path)
        assert (back.t0, back.lead_steps) == (run.t0, run.lead_steps)
        assert back.requested_members == run.requested_members
        assert back.surviving == run.surviving
        assert back.member_seeds == run.member_seeds
        assert back.casualties == run.casualties
        assert back.master_seed == run.master_seed
        assert back.guidance == run.guidance
        assert back.perturb_first_only == run.perturb_first_only
        assert back.provenance == run.provenance
        for ta, tb in zip(run.members, back.members):
            for sa, sb in zip(ta, tb):
                # the container stores fields in 32-bit precision
                np.testing.assert_array_equal(
                    sa.data.astype("<f4").astype(np.float64), sb.data
                )
                assert sa.time_index == sb.time_index
        for sa, sb in zip(run.baseline, back.baseline):
            np.testing.assert_array_equal(
                sa.data.astype("<f4").astype(np.float64), sb.data
            )

    def test_unperturbed_run_round_trips_none_guidance(
        self, tmp_path, toy_system, toy_forecaster
    ):
        x0 = toy_system.norm[toy_system.n_train]
        run = run_ensemble(x0, toy_forecaster, None, 1, 1, None, master_seed=0)
        path = tmp_path / "det.bin"
        save_run(path, run)
        assert load_run(path).guidance is None

    def test_sidecar_mismatch_rejected(self, tmp_path, toy_system, toy_forecaster):
        x0 = toy_system.norm[toy_system.n_train]
        run = run_ensemble(x0, toy_forecaster, None, 2, 2, None, master_seed=0)
        path = tmp_path / "run.bin"
        save_run(path, run)
        sidecar = tmp_path / "run.bin.json"
        meta = json.loads(sidecar.read_text())
        meta["surviving"].append(5)
        sidecar.write_text(json.dumps(meta))
        with pytest.raises(ValueError, match="state count"):
            load_run(path)
