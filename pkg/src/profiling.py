"""
Latency profiling of the control loop over prediction horizons.
"""
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .config import SimulationConfig
from .harness import build_full_plant_model, make_plant, resolve_reduced_model, run_closed_loop
from .models import PlantKind, TraceFlag
from .mor import ReducedModel
from .physical_model import FullOrderModel
from .utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_HORIZONS = (2, 5, 10, 15, 20)


def profile_latency(
    sim: SimulationConfig,
    repetitions: int = 1,
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    reduced: Optional[ReducedModel] = None,
    full_model: Optional[FullOrderModel] = None,
) -> pd.DataFrame:
    """Average and maximal QP / loop time per horizon, in milliseconds.

    ``max_qp_at_first_step`` counts the repetitions whose slowest solve was the
    cold-started first control step.
    """
    if full_model is None and sim.scenario.plant is PlantKind.FULL:
        full_model = build_full_plant_model(sim)
    if reduced is None:
        reduced = resolve_reduced_model(sim, full_model)
    deadline_ms = sim.scenario.dt * 1e3
    records = []
    for horizon in horizons:
        run_sim = sim.with_overrides({"scenario.horizon": horizon, "scenario.record_timing": True})
        qp_ms, loop_ms, iters = [], [], []
        misses = first_max = 0
        for _ in range(repetitions):
            plant = make_plant(run_sim, reduced, full_model)
            trace = run_closed_loop(run_sim, reduced=reduced, plant=plant)
            rows = [row for row in trace.rows if TraceFlag.PROBE not in row.flags]
            qp = np.array([row.qp_time_ns for row in rows]) / 1e6
            qp_ms.append(qp)
            loop_ms.append(np.array([row.loop_time_ns for row in rows]) / 1e6)
            iters.append(np.array([row.qp_iters for row in rows]))
            misses += len(trace.rows_with(TraceFlag.DEADLINE_MISS))
            first_max += int(np.argmax(qp) == 0)
        qp_all, loop_all = np.concatenate(qp_ms), np.concatenate(loop_ms)
        records.append(
            {
                "horizon": horizon,
                "avg_qp_ms": float(qp_all.mean()),
                "max_qp_ms": float(qp_all.max()),
                "avg_loop_ms": float(loop_all.mean()),
                "max_loop_ms": float(loop_all.max()),
                "avg_qp_iters": float(np.concatenate(iters).mean()),
                "deadline_ms": deadline_ms,
                "deadline_misses": misses,
                "max_qp_at_first_step": first_max,
            }
        )
        logger.info(
            f"N={horizon}: QP avg {records[-1]['avg_qp_ms']:.3f} ms / max {records[-1]['max_qp_ms']:.3f} ms, "
            f"loop avg {records[-1]['avg_loop_ms']:.3f} ms, {misses} deadline misses"
        )
    return pd.DataFrame.from_records(records)
