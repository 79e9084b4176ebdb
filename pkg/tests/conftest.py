"""Session fixtures: a small chaotic testbed plus models trained on it.

Training is fully seeded, so every session rebuilds bit-identical
fixtures.  Wall-clock durations are recorded in the `timings` fixture
so the acceptance tests can report budgets inclusive of training.
"""

import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diffens.diffusion import train_diffusion
from diffens.dynamics import DynamicsConfig, ForcingSpec, generate_trajectory
from diffens.forecaster import train_forecaster
from diffens.grid import NormStats, compute_stats, make_windows, normalize
from diffens.nn.unet import NetSpec

N_TRAIN = 1200
LEAD = 48


@dataclass
class ToySystem:
    """Trajectory of the 2-variable testbed with its normalization."""

    cfg: DynamicsConfig
    traj: list
    stats: NormStats
    norm: list
    n_train: int = N_TRAIN
    lead: int = LEAD


@pytest.fixture(scope="session")
def timings():
    """Wall-clock seconds of the expensive session fixtures, by name."""
    return {}


@pytest.fixture(scope="session")
def toy_system():
    cfg = DynamicsConfig(vars=2, forcings=2, height=16, width=8, n_bumps=3)
    traj = generate_trajectory(cfg, N_TRAIN + LEAD + 10, seed=7)
    stats = compute_stats(traj[:N_TRAIN])
    norm = [normalize(s, stats) for s in traj]
    return ToySystem(cfg, traj, stats, norm)


@pytest.fixture(scope="session")
def toy_forecaster_trained(toy_system, timings):
    t0 = time.time()
    spec = NetSpec(
        in_channels=4,
        out_channels=2,
        stages=((8, True), (16, True)),
        temb_width=0,
        attention=True,
    )
    model, log = train_forecaster(
        make_windows(toy_system.norm[:N_TRAIN]),
        toy_system.stats,
        ForcingSpec.from_config(toy_system.cfg),
        spec=spec,
        epochs=25,
        batch_size=32,
        lr=1e-3,
        seed=0,
    )
    timings["train_forecaster"] = time.time() - t0
    return model, log


@pytest.fixture(scope="session")
def toy_forecaster(toy_forecaster_trained):
    return toy_forecaster_trained[0]


@pytest.fixture(scope="session")
def toy_denoiser_trained(toy_system, toy_forecaster, timings):
    t0 = time.time()
    spec = NetSpec(
        in_channels=5,
        out_channels=2,
        stages=((16, True), (32, True)),
        temb_width=32,
        attention=True,
    )
    model, log = train_diffusion(
        toy_system.norm[:N_TRAIN],
        toy_forecaster,
        spec=spec,
        epochs=300,
        batch_size=32,
        lr=2e-4,
        cond_prob=0.9,
        seed=1,
    )
    timings["train_diffusion"] = time.time() - t0
    return model, log


@pytest.fixture(scope="session")
def toy_denoiser(toy_denoiser_trained):
    return toy_denoiser_trained[0]
