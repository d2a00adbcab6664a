"""
Closed-loop simulator: plant -> measurement -> EKF -> MPC -> plant.
"""
import time
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from .config import SimulationConfig
from .estimator import ExtendedKalmanFilter
from .exceptions import ConfigurationError, RunAbortedError
from .models import AbsorptionProfile, OcpSpec, PlantKind, TraceFlag
from .mor import ReducedModel, build_reduced_model, load_reduced_model
from .mpc import MpcController
from .physical_model import FullOrderModel, build_full_model, build_grid
from .plant import FullOrderPlant, Plant, ReducedPlant
from .trace import ClosedLoopTrace, TraceRow, summarize
from .utils.logger import get_logger, scenario_context, setup_logger

logger = get_logger(__name__)


def ocp_spec(sim: SimulationConfig) -> OcpSpec:
    s = sim.scenario
    return OcpSpec(
        n_steps=s.horizon,
        u_max=s.u_max,
        y_peak_ref=s.y_peak_ref,
        y_peak_max=s.y_peak_max,
        peak_confidence=s.peak_confidence,
    )


def check_rate_consistency(reduced: ReducedModel, sim: SimulationConfig) -> None:
    """The reduced model must be discretised at the loop period."""
    if not np.isclose(reduced.dt, sim.scenario.dt, rtol=1e-12, atol=0.0):
        raise ConfigurationError(
            f"reduced model step {reduced.dt * 1e3:g} ms does not match "
            f"{sim.scenario.rate_hz} Hz ({sim.scenario.dt * 1e3:g} ms)"
        )


def build_full_plant_model(sim: SimulationConfig) -> FullOrderModel:
    grid = build_grid(sim.geometry, sim.grid.n_r, sim.grid.n_z)
    absorption = AbsorptionProfile(
        alpha=sim.scenario.alpha_true, mu_rpe_ref=sim.optics.mu_rpe_ref, mu_choroid=sim.optics.mu_choroid
    )
    return build_full_model(sim.geometry, sim.material, absorption, grid, sim.optics, dts=(sim.scenario.dt,))


def resolve_reduced_model(sim: SimulationConfig, full_model: Optional[FullOrderModel] = None) -> ReducedModel:
    """Load the scenario's artifact, or build the reduced model from scratch."""
    if sim.scenario.rom_artifact:
        reduced = load_reduced_model(sim.scenario.rom_artifact)
    else:
        reduced = build_reduced_model(sim, sim.scenario.dt, full_model)
    check_rate_consistency(reduced, sim)
    return reduced


def make_plant(sim: SimulationConfig, reduced: ReducedModel, full_model: Optional[FullOrderModel] = None) -> Plant:
    s = sim.scenario
    rng = np.random.default_rng(s.rng_seed)
    if s.plant is PlantKind.REDUCED:
        return ReducedPlant(reduced, s.alpha_true, s.noise_std_K, rng)
    if full_model is None:
        full_model = build_full_plant_model(sim)
    return FullOrderPlant(full_model, s.alpha_true, s.dt, s.noise_std_K, rng)


class ClosedLoopSimulator:
    """One scenario run; estimator and controller never see the plant."""

    def __init__(self, sim: SimulationConfig, reduced: ReducedModel, plant: Plant):
        check_rate_consistency(reduced, sim)
        self.sim = sim
        self.scenario = sim.scenario
        self.reduced = reduced
        self.plant = plant
        self.estimator = ExtendedKalmanFilter(reduced, sim.estimator, alpha0=self.scenario.alpha_init)
        self.controller = MpcController(
            reduced, ocp_spec(sim), self.scenario.cost_config(), sim.solver, alpha0=self.scenario.alpha_init
        )
        self.trace = ClosedLoopTrace(scenario=self.scenario.name)
        self._deadline_ns = int(round(self.scenario.dt * 1e9))
        self._step = 0

    def run(self) -> ClosedLoopTrace:
        with scenario_context(self.scenario.name):
            return self._run()

    def _run(self) -> ClosedLoopTrace:
        s = self.scenario
        logger.info(
            f"Starting scenario '{s.name}': {s.rate_hz} Hz, {s.plant.value} plant, alpha_true={s.alpha_true}, "
            f"cost={s.cost.value}, N={s.horizon}, {s.n_steps} steps"
        )
        if s.initial_probe is not None:
            for _ in range(s.initial_probe.steps):
                self._probe_step(s.initial_probe.power_W)
        for _ in range(s.n_steps):
            self._control_step()
        summary = summarize(self.trace, s.y_peak_ref, s.y_peak_max, s.alpha_true)
        logger.info(f"Finished scenario '{s.name}': {summary}")
        return self.trace

    def _estimate(self, u: float, y_meas: float):
        self.estimator.predict(u)
        state = self.estimator.update(y_meas)
        if not (np.all(np.isfinite(state.x_hat)) and np.isfinite(state.alpha_hat)):
            raise RunAbortedError(f"estimator diverged at step {self._step}")
        return state

    def _record(self, u, y_meas, u_ref, qp_iters, qp_time_ns, loop_time_ns, flags) -> None:
        truth = self.plant.truth()
        state = self.estimator.state
        if state.alpha_clamped:
            flags = flags | {TraceFlag.ALPHA_CLAMPED}
        if not self.scenario.record_timing:
            qp_time_ns = loop_time_ns = 0
        elif loop_time_ns > self._deadline_ns:
            flags = flags | {TraceFlag.DEADLINE_MISS}
            logger.warning(f"Step {self._step}: loop took {loop_time_ns / 1e6:.3f} ms, deadline {self._deadline_ns / 1e6:.3f} ms")
        self.trace.append(
            TraceRow(
                step=self._step,
                t_s=(self._step + 1) * self.scenario.dt,
                u_W=u,
                yvol_meas_K=y_meas,
                yvol_true_K=truth.y_vol,
                ypeak_true_K=truth.y_peak,
                ypeak_est_K=self.estimator.peak_estimate(),
                alpha_hat=state.alpha_hat,
                u_ref_W=u_ref,
                qp_iters=qp_iters,
                qp_time_ns=qp_time_ns,
                loop_time_ns=loop_time_ns,
                flags=frozenset(flags),
            )
        )
        logger.debug(
            f"Step {self._step}: u={u:.5f} W, y_vol={y_meas:.3f} K, y_peak={truth.y_peak:.3f} K, "
            f"alpha_hat={state.alpha_hat:.4f}"
        )
        self._step += 1

    def _probe_step(self, power: float) -> None:
        self.plant.step(power)
        y_meas = self.plant.measure()
        start = time.perf_counter_ns()
        self._estimate(power, y_meas)
        loop_ns = time.perf_counter_ns() - start
        self._record(power, y_meas, self.controller.state.u_ref, 0, 0, loop_ns, {TraceFlag.PROBE})

    def _control_step(self) -> None:
        start = time.perf_counter_ns()
        state = self.estimator.state
        result = self.controller.step(state.x_hat, state.alpha_hat, p_cov=state.p_cov)
        control_ns = time.perf_counter_ns() - start

        self.plant.step(result.u_applied)
        y_meas = self.plant.measure()

        start = time.perf_counter_ns()
        self._estimate(result.u_applied, y_meas)
        loop_ns = control_ns + time.perf_counter_ns() - start
        self._record(
            result.u_applied, y_meas, result.u_ref, result.iters, result.solve_time_ns, loop_ns, set(result.flags)
        )


def run_closed_loop(
    sim: SimulationConfig,
    reduced: Optional[ReducedModel] = None,
    full_model: Optional[FullOrderModel] = None,
    plant: Optional[Plant] = None,
) -> ClosedLoopTrace:
    """Run one scenario end to end."""
    if plant is None and full_model is None and sim.scenario.plant is PlantKind.FULL:
        full_model = build_full_plant_model(sim)
    if reduced is None:
        reduced = resolve_reduced_model(sim, full_model)
    if plant is None:
        plant = make_plant(sim, reduced, full_model)
    return ClosedLoopSimulator(sim, reduced, plant).run()


def _run_worker(sim: SimulationConfig) -> ClosedLoopTrace:
    return run_closed_loop(sim)


def run_sweep(scenarios: Sequence[SimulationConfig], workers: int = 1) -> List[ClosedLoopTrace]:
    """Independent scenarios, one loop per worker process; results in input order."""
    if workers <= 1:
        return [_run_worker(sim) for sim in scenarios]
    setup_logger(enqueue=True)
    logger.info(f"Running {len(scenarios)} scenarios on {workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_worker, scenarios))
