from pathlib import Path

import numpy as np
import pytest

from laneopt.params import DecisionWeights
from laneopt.scenario import Horizon, Lane, ScenarioConfig, SvState, load_scenario
from laneopt.vehicle import EgoState

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def toy_scenario(seed: int) -> ScenarioConfig:
    """Small two-lane instances for exhaustive solver cross-checks."""
    rng = np.random.default_rng(seed)
    T = int(rng.integers(3, 5))
    lanes = (Lane(1, 4.0, 4.0, 15.0), Lane(2, 0.0, 4.0, 15.0))
    n_sv = int(rng.integers(0, 2 if T == 4 else 3))
    svs = tuple(
        SvState(
            id=i + 1,
            px=float(rng.uniform(-10, 25)),
            py=float(rng.choice([0.0, 4.0])),
            vx=float(rng.uniform(2, 12)),
            vy=0.0,
            length=4.5,
            width=2.0,
        )
        for i in range(n_sv)
    )
    ev = EgoState(0.0, float(rng.choice([0.0, 4.0])), 0.0, float(rng.uniform(4, 12)))
    weights = DecisionWeights(
        track_y=float(rng.uniform(0.1, 1.0)),
        velocity=float(rng.uniform(0.02, 0.3)),
        speed_lv=float(rng.uniform(0.05, 0.4)),
        dist_lv=float(rng.uniform(50, 400)),
        speed_nv=float(rng.uniform(0.05, 0.4)),
        dist_nv=float(rng.uniform(20, 100)),
    )
    horizon = Horizon(T=T, dt_decision=0.5, N=T * 5, dt_traj=0.1)
    return ScenarioConfig(
        road=lanes, ev_init=ev, svs=svs, horizon=horizon,
        decision_weights=weights, name=f"toy{seed}",
    )


def toy_scenarios(count: int, max_free: int = 20, start_seed: int = 0):
    """First `count` toy models with at most `max_free` free binaries."""
    from laneopt.miqp import build_decision_miqp

    out = []
    seed = start_seed
    while len(out) < count and seed < start_seed + 400:
        sc = toy_scenario(seed)
        seed += 1
        model = build_decision_miqp(sc)
        if len(model.free_binaries) <= max_free:
            out.append((sc, model))
    return out


@pytest.fixture(scope="session")
def scenario1():
    return load_scenario(SCENARIOS / "s1.json")


@pytest.fixture(scope="session")
def scenario2():
    return load_scenario(SCENARIOS / "s2.json")


@pytest.fixture(scope="session")
def scenario3():
    return load_scenario(SCENARIOS / "s3.json")


@pytest.fixture(scope="session")
def scenario4():
    return load_scenario(SCENARIOS / "s4.json")
