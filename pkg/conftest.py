"""
Shared fixtures: a coarse 16x40 grid keeps the offline pipeline to a few
seconds, and every model below is built once per session.
"""
import itertools

import numpy as np
import pytest

from src.config import SimulationConfig
from src.harness import build_full_plant_model
from src.mor import build_reduced_model


COARSE = {"grid.n_r": 16, "grid.n_z": 40, "scenario.record_timing": False}


def coarse_sim(**overrides) -> SimulationConfig:
    """Default configuration on the coarse grid, plus dotted overrides."""
    return SimulationConfig().with_overrides({**COARSE, **overrides})


@pytest.fixture(scope="session")
def sim_250() -> SimulationConfig:
    return coarse_sim(**{"scenario.rate_hz": 250})


@pytest.fixture(scope="session")
def sim_1k() -> SimulationConfig:
    return coarse_sim(**{"scenario.rate_hz": 1000, "scenario.cost": "kHz"})


@pytest.fixture(scope="session")
def full_model_250(sim_250):
    return build_full_plant_model(sim_250)


@pytest.fixture(scope="session")
def full_model_1k(sim_1k):
    return build_full_plant_model(sim_1k)


@pytest.fixture(scope="session")
def rom_250(sim_250, full_model_250):
    return build_reduced_model(sim_250, sim_250.scenario.dt, full_model_250)


@pytest.fixture(scope="session")
def rom_1k(sim_1k, full_model_1k):
    return build_reduced_model(sim_1k, sim_1k.scenario.dt, full_model_1k)


def _enumerate_active_sets(p, q, a, lb, ub, tol=1e-9):
    """Exact minimiser of a small strictly convex QP by trying every active set."""
    n, m = p.shape[0], a.shape[0]
    best_x, best_obj = None, np.inf
    for choice in itertools.product((None, "l", "u"), repeat=m):
        rows = [i for i, c in enumerate(choice) if c is not None]
        if len(rows) > n:
            continue
        if any((c == "l" and np.isinf(lb[i])) or (c == "u" and np.isinf(ub[i])) for i, c in enumerate(choice)):
            continue
        if any(c == "u" and lb[i] == ub[i] for i, c in enumerate(choice)):
            continue
        target = np.array([lb[i] if choice[i] == "l" else ub[i] for i in rows])
        a_w = a[rows, :]
        kkt = np.block([[p, a_w.T], [a_w, np.zeros((len(rows), len(rows)))]])
        try:
            sol = np.linalg.solve(kkt, np.r_[-q, target])
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        ax = a @ x
        if np.any(ax < lb - tol) or np.any(ax > ub + tol):
            continue
        obj = 0.5 * x @ p @ x + q @ x
        if obj < best_obj:
            best_x, best_obj = x, obj
    return best_x, best_obj


@pytest.fixture(scope="session")
def kkt_oracle():
    return _enumerate_active_sets
