"""
Model predictive controller for the peak temperature.

OCP(n) is posed as a sparse QP over z = [x_0, ..., x_{N-1}, u_0, ..., u_{N-2}].
P and A keep a fixed sparsity pattern for all steps: x0, u_ref and u_prev only
move vectors, b(alpha) and the R0 schedule only move matrix values.
"""
from dataclasses import dataclass
from typing import FrozenSet, Optional, Tuple

import numpy as np
import scipy.sparse as sparse

from .config import SolverSettings
from .exceptions import ModelError
from .models import CostConfig, OcpSpec, QpStatus, TraceFlag
from .mor import ReducedModel
from .qp_solver import QpProblem, QpSolution, SolverHandle, setup
from .utils.logger import get_logger

logger = get_logger(__name__)

SOFT_PENALTY = 1e6  # per K of peak-bound violation
CONSTRAINT_TOL_K = 1e-3


@dataclass
class MpcState:
    u_prev: float
    u_ref: float
    step_index: int = 0


@dataclass
class MpcStepResult:
    """What one controller step applied and why."""
    u_applied: float
    u_ref: float
    status: QpStatus
    iters: int
    solve_time_ns: int
    flags: FrozenSet[TraceFlag] = frozenset()
    x_pred: Optional[np.ndarray] = None
    u_plan: Optional[np.ndarray] = None


@dataclass(frozen=True)
class OcpLayout:
    """Index bookkeeping of the sparse OCP; ``soft`` adds one slack per peak row."""
    rank: int
    n_steps: int
    soft: bool = False

    @property
    def n_x(self) -> int:
        return self.n_steps * self.rank

    @property
    def n_u(self) -> int:
        return self.n_steps - 1

    @property
    def n_s(self) -> int:
        return self.n_steps if self.soft else 0

    @property
    def n_var(self) -> int:
        return self.n_x + self.n_u + self.n_s

    @property
    def n_con(self) -> int:
        return self.n_x + self.n_u + self.n_steps + self.n_s

    def x(self, k: int) -> slice:
        return slice(k * self.rank, (k + 1) * self.rank)

    def u(self, k: int) -> int:
        return self.n_x + k

    def s(self, k: int) -> int:
        return self.n_x + self.n_u + k

    @property
    def u_slice(self) -> slice:
        return slice(self.n_x, self.n_x + self.n_u)

    def dyn_rows(self, k: int) -> slice:
        return slice(self.rank * (k + 1), self.rank * (k + 2))

    def input_row(self, k: int) -> int:
        return self.n_x + k

    def peak_row(self, k: int) -> int:
        return self.n_x + self.n_u + k

    def slack_row(self, k: int) -> int:
        return self.n_x + self.n_u + self.n_steps + k

    def split(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(states N x r, controls N-1) from a decision vector."""
        return z[: self.n_x].reshape(self.n_steps, self.rank), z[self.u_slice]


def reference_control(model: ReducedModel, alpha: float, y_peak_ref: float) -> float:
    """Steady-state power holding y_peak at its reference, by discrete static-gain inversion."""
    if y_peak_ref == 0:
        return 0.0
    gain = model.steady_state_gain(alpha)
    if not gain > 0:
        raise ModelError(f"steady-state gain is not positive at alpha={alpha}: {gain}")
    return float(y_peak_ref / gain)


def _control_difference(n_u: int) -> np.ndarray:
    """Rows u_0, u_1 - u_0, ..., u_{N-2} - u_{N-3}."""
    return np.eye(n_u) - np.eye(n_u, k=-1)


def evaluate_cost(
    model: ReducedModel,
    spec: OcpSpec,
    cost: CostConfig,
    xs: np.ndarray,
    us: np.ndarray,
    u_ref: float,
    u_prev: float,
    n: int,
) -> float:
    """Stage cost of a predicted trajectory, term by term."""
    peaks = xs @ model.c_peak_r
    tracking = sum(cost.r0(n + k) * (peaks[k] - spec.y_peak_ref) ** 2 for k in range(len(peaks)))
    offset = cost.r1 * float(np.sum((us - u_ref) ** 2))
    variation = cost.r2 * (float(np.sum(np.diff(us) ** 2)) + (us[0] - u_prev) ** 2)
    return float(tracking + offset + variation)


def _positions(matrix: sparse.csc_matrix, rows, cols) -> np.ndarray:
    """Offsets of the stored entries (rows[i], cols[i]) in ``matrix.data``."""
    out = np.empty(len(rows), dtype=np.intp)
    for i, (row, col) in enumerate(zip(rows, cols)):
        lo, hi = matrix.indptr[col], matrix.indptr[col + 1]
        offset = lo + int(np.searchsorted(matrix.indices[lo:hi], row))
        if offset >= hi or matrix.indices[offset] != row:
            raise ModelError(f"entry ({row}, {col}) is not in the OCP pattern")
        out[i] = offset
    return out


class OcpBuilder:
    """
    Assembles OCP(n) data on the fixed sparsity pattern of its layout.

    P and A are built once as templates; per step only the R0-weighted state
    blocks of P and the b(alpha) columns and peak-row input entries of A change,
    and those are addressed by their positions in the CSC data arrays.
    """

    def __init__(self, model: ReducedModel, spec: OcpSpec, cost: CostConfig, soft: bool = False):
        spec.check()
        self.model = model
        self.spec = spec
        self.cost = cost
        self.layout = OcpLayout(model.rank, spec.n_steps, soft)
        self._c_powers = self._peak_powers()
        self._p_template = self._on_pattern(self._p_dense(), self._pattern(self._p_mask()))
        self._a_template = self._on_pattern(self._a_dense(), self._pattern(self._a_mask()))
        self.p_index = self._p_index()
        self.a_index, self._input_power = self._a_index()

    @staticmethod
    def _pattern(mask: np.ndarray):
        pattern = sparse.csc_matrix(mask.astype(float))
        pattern.sort_indices()
        cols = np.repeat(np.arange(pattern.shape[1]), np.diff(pattern.indptr))
        return pattern, pattern.indices.copy(), cols

    @staticmethod
    def _on_pattern(dense: np.ndarray, pattern) -> sparse.csc_matrix:
        structure, rows, cols = pattern
        out = structure.copy()
        out.data[:] = dense[rows, cols]
        return out

    def _peak_powers(self) -> np.ndarray:
        """Row m is c_peak A^m, m = 0 .. N-1."""
        powers = np.empty((self.spec.n_steps, self.model.rank))
        powers[0] = self.model.c_peak_r
        for m in range(1, self.spec.n_steps):
            powers[m] = powers[m - 1] @ self.model.a_d
        return powers

    def _p_mask(self) -> np.ndarray:
        lay = self.layout
        mask = np.zeros((lay.n_var, lay.n_var), dtype=bool)
        for k in range(lay.n_steps):
            mask[lay.x(k), lay.x(k)] = True
        u = lay.u_slice
        mask[u, u] = np.abs(_control_difference(lay.n_u).T @ _control_difference(lay.n_u)) + np.eye(lay.n_u) > 0
        return mask

    def _a_mask(self) -> np.ndarray:
        lay, r = self.layout, self.layout.rank
        mask = np.zeros((lay.n_con, lay.n_var), dtype=bool)
        mask[lay.x(0), lay.x(0)] = np.eye(r, dtype=bool)
        for k in range(lay.n_steps - 1):
            rows = lay.dyn_rows(k)
            mask[rows, lay.x(k + 1)] = np.eye(r, dtype=bool)
            mask[rows, lay.x(k)] = True
            mask[rows, lay.u(k)] = True
            mask[lay.input_row(k), lay.u(k)] = True
        for k in range(lay.n_steps):
            mask[lay.peak_row(k), lay.x(k)] = True
            # alpha-confidence entries, zero in the nominal problem
            for j in range(k):
                mask[lay.peak_row(k), lay.u(j)] = True
            if lay.soft:
                mask[lay.peak_row(k), lay.s(k)] = True
                mask[lay.slack_row(k), lay.s(k)] = True
        return mask

    def _p_dense(self) -> np.ndarray:
        """P with zero state weights; those blocks are filled per step."""
        lay = self.layout
        p = np.zeros((lay.n_var, lay.n_var))
        diff = _control_difference(lay.n_u)
        p[lay.u_slice, lay.u_slice] = 2.0 * (self.cost.r1 * np.eye(lay.n_u) + self.cost.r2 * diff.T @ diff)
        return p

    def _a_dense(self) -> np.ndarray:
        """A without the b(alpha) columns and the alpha-confidence entries."""
        lay, r = self.layout, self.layout.rank
        a = np.zeros((lay.n_con, lay.n_var))
        a[lay.x(0), lay.x(0)] = np.eye(r)
        for k in range(lay.n_steps - 1):
            rows = lay.dyn_rows(k)
            a[rows, lay.x(k + 1)] = np.eye(r)
            a[rows, lay.x(k)] = -self.model.a_d
            a[lay.input_row(k), lay.u(k)] = 1.0
        for k in range(lay.n_steps):
            a[lay.peak_row(k), lay.x(k)] = self.model.c_peak_r
            if lay.soft:
                a[lay.peak_row(k), lay.s(k)] = -1.0
                a[lay.slack_row(k), lay.s(k)] = 1.0
        return a

    def _p_index(self) -> np.ndarray:
        lay, r = self.layout, self.layout.rank
        rows, cols = [], []
        for k in range(lay.n_steps):
            block = np.arange(lay.x(k).start, lay.x(k).stop)
            rows.append(np.repeat(block, r))
            cols.append(np.tile(block, r))
        return _positions(self._p_template, np.concatenate(rows), np.concatenate(cols))

    def _a_index(self) -> Tuple[np.ndarray, np.ndarray]:
        """Positions of the -b columns, then of the peak-row input entries with their A-power."""
        lay, r = self.layout, self.layout.rank
        rows, cols, powers = [], [], []
        for k in range(lay.n_steps - 1):
            rows.extend(range(lay.dyn_rows(k).start, lay.dyn_rows(k).stop))
            cols.extend([lay.u(k)] * r)
        for k in range(1, lay.n_steps):
            for j in range(k):
                rows.append(lay.peak_row(k))
                cols.append(lay.u(j))
                powers.append(k - 1 - j)
        return _positions(self._a_template, rows, cols), np.asarray(powers, dtype=np.intp)

    def r0_weights(self, n: int) -> Tuple[float, ...]:
        return tuple(self.cost.r0(n + k) for k in range(self.spec.n_steps))

    def p_entry_values(self, n: int) -> np.ndarray:
        """State-block values of P, in the order of ``p_index``."""
        cc = np.outer(self.model.c_peak_r, self.model.c_peak_r).ravel()
        return np.concatenate([2.0 * w * cc for w in self.r0_weights(n)])

    def a_entry_values(self, b: np.ndarray, delta_b: Optional[np.ndarray] = None) -> np.ndarray:
        """b(alpha)-dependent values of A, in the order of ``a_index``."""
        dynamics = np.tile(-np.asarray(b, dtype=float), self.layout.n_u)
        if delta_b is None:
            robust = np.zeros(self._input_power.size)
        else:
            robust = (self._c_powers @ delta_b)[self._input_power]
        return np.concatenate([dynamics, robust])

    def cost_matrix(self, n: int) -> sparse.csc_matrix:
        out = self._p_template.copy()
        out.data[self.p_index] = self.p_entry_values(n)
        return out

    def constraint_matrix(self, b: np.ndarray, delta_b: Optional[np.ndarray] = None) -> sparse.csc_matrix:
        out = self._a_template.copy()
        out.data[self.a_index] = self.a_entry_values(b, delta_b)
        return out

    def cost_vectors(self, u_ref: float, u_prev: float, n: int) -> Tuple[np.ndarray, float]:
        """Linear term and constant of the cost."""
        lay, spec, cost = self.layout, self.spec, self.cost
        c = self.model.c_peak_r
        q = np.zeros(lay.n_var)
        constant = 0.0
        for k, w in enumerate(self.r0_weights(n)):
            q[lay.x(k)] = -2.0 * w * spec.y_peak_ref * c
            constant += w * spec.y_peak_ref ** 2
        q[lay.u_slice] = -2.0 * cost.r1 * u_ref
        q[lay.u(0)] -= 2.0 * cost.r2 * u_prev
        constant += cost.r1 * lay.n_u * u_ref ** 2 + cost.r2 * u_prev ** 2
        if lay.soft:
            q[lay.n_x + lay.n_u:] = SOFT_PENALTY
        return q, constant

    def bounds(self, x0: np.ndarray, peak_margin: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Bounds; ``peak_margin`` (one value per peak row) is taken off y_peak_max."""
        lay = self.layout
        lb = np.zeros(lay.n_con)
        ub = np.zeros(lay.n_con)
        lb[lay.x(0)] = ub[lay.x(0)] = x0
        inputs = slice(lay.n_x, lay.n_x + lay.n_u)
        ub[inputs] = self.spec.u_max
        peaks = slice(lay.n_x + lay.n_u, lay.n_x + lay.n_u + lay.n_steps)
        lb[peaks] = -np.inf
        ub[peaks] = self.spec.y_peak_max
        if peak_margin is not None:
            ub[peaks] -= peak_margin
        if lay.soft:
            ub[lay.n_x + lay.n_u + lay.n_steps:] = np.inf
        return lb, ub

    def alpha_upper(self, alpha: float, p_cov: Optional[np.ndarray]) -> float:
        """alpha + k sigma_alpha, clamped to the model's range and never below alpha."""
        k = self.spec.peak_confidence
        if p_cov is None or k == 0:
            return alpha
        var = float(p_cov[-1, -1])
        if not var > 0:
            return alpha
        return max(alpha, min(alpha + k * np.sqrt(var), self.model.clamp[1]))

    def confidence_terms(self, alpha: float, p_cov: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Input-column change db = b(alpha_hi) - b(alpha) and the per-row peak margin.

        The margin is the peak of the state shift P_xa / P_aa * (alpha_hi - alpha)
        propagated k steps; row 0 carries none since no input acts on it, and a
        negative margin is dropped so the bound is never looser than nominal.
        """
        r, n_steps = self.model.rank, self.spec.n_steps
        if p_cov is not None and np.shape(p_cov) != (r + 1, r + 1):
            raise ModelError(f"covariance must be {r + 1}x{r + 1}, got {np.shape(p_cov)}")
        alpha_hi = self.alpha_upper(alpha, p_cov)
        d_alpha = alpha_hi - alpha
        if d_alpha <= 0:
            return np.zeros(r), np.zeros(n_steps)
        delta_b = self.model.b(alpha_hi) - self.model.b(alpha)
        shift = p_cov[:-1, -1] / p_cov[-1, -1] * d_alpha
        margin = np.maximum(self._c_powers @ shift, 0.0)
        margin[0] = 0.0
        return delta_b, margin

    def confidence_peaks(self, xs: np.ndarray, us: np.ndarray, delta_b: np.ndarray, margin: np.ndarray) -> np.ndarray:
        """Peak of each predicted state under alpha_hi, as the tightened rows see it."""
        forced = self._c_powers @ delta_b
        peaks = xs @ self.model.c_peak_r + margin
        for k in range(1, len(peaks)):
            peaks[k] += forced[k - 1 :: -1][:k] @ us[:k]
        return peaks

    def problem(
        self,
        alpha: float,
        x0: np.ndarray,
        u_prev: float,
        u_ref: float,
        n: int,
        p_cov: Optional[np.ndarray] = None,
    ) -> QpProblem:
        q, constant = self.cost_vectors(u_ref, u_prev, n)
        delta_b, margin = self.confidence_terms(alpha, p_cov)
        lb, ub = self.bounds(np.asarray(x0, dtype=float), margin)
        return QpProblem(
            p_mat=self.cost_matrix(n),
            q_vec=q,
            a_con=self.constraint_matrix(self.model.b(alpha), delta_b),
            lb=lb,
            ub=ub,
            constant=constant,
        )


def build_ocp(
    model: ReducedModel,
    spec: OcpSpec,
    cost: CostConfig,
    alpha: float,
    x0: np.ndarray,
    u_prev: float,
    n: int,
    u_ref: Optional[float] = None,
    soft: bool = False,
    p_cov: Optional[np.ndarray] = None,
) -> QpProblem:
    """OCP(n) as a sparse QP; u_ref defaults to the static inversion at ``alpha``."""
    if u_ref is None:
        u_ref = reference_control(model, alpha, spec.y_peak_ref)
    return OcpBuilder(model, spec, cost, soft).problem(alpha, x0, u_prev, u_ref, n, p_cov)


class _QpSlot:
    """A solver handle plus the matrix entries it was last factorized with."""

    def __init__(self, builder: OcpBuilder, problem: QpProblem, n: int, settings: SolverSettings):
        self.builder = builder
        self.handle: SolverHandle = setup(problem, settings)
        self.r0 = builder.r0_weights(n)
        self.a_values = problem.a_con.data[builder.a_index].copy()

    def refresh(self, alpha, x0, u_prev, u_ref, n, delta_b, margin) -> None:
        builder = self.builder
        q, constant = builder.cost_vectors(u_ref, u_prev, n)
        lb, ub = builder.bounds(x0, margin)
        self.handle.update_vectors(q_vec=q, lb=lb, ub=ub)
        self.handle.constant = constant
        r0 = builder.r0_weights(n)
        p_values = builder.p_entry_values(n) if r0 != self.r0 else None
        a_values = builder.a_entry_values(builder.model.b(alpha), delta_b)
        if np.array_equal(a_values, self.a_values):
            a_values = None
        self.handle.update_matrix_entries(
            p_values=p_values, p_index=builder.p_index, a_values=a_values, a_index=builder.a_index
        )
        self.r0 = r0
        if a_values is not None:
            self.a_values = a_values


class MpcController:
    """Receding-horizon controller; sees only the reduced model and the estimates."""

    def __init__(
        self,
        model: ReducedModel,
        spec: OcpSpec,
        cost: CostConfig,
        settings: SolverSettings = SolverSettings(),
        alpha0: float = 0.7363,
    ):
        spec.check()
        self.model = model
        self.spec = spec
        self.cost = cost
        u_ref = reference_control(model, alpha0, spec.y_peak_ref)
        self.state = MpcState(u_prev=min(max(u_ref, 0.0), spec.u_max), u_ref=u_ref, step_index=0)
        x0 = np.zeros(model.rank)
        slots = []
        for soft in (False, True):
            builder = OcpBuilder(model, spec, cost, soft)
            problem = builder.problem(alpha0, x0, self.state.u_prev, u_ref, 0)
            slots.append(_QpSlot(builder, problem, 0, settings))
        self._hard, self._soft = slots
        self._warm: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def layout(self) -> OcpLayout:
        return self._hard.builder.layout

    @property
    def handle(self) -> SolverHandle:
        return self._hard.handle

    def _extract(self, solution: QpSolution, layout: OcpLayout) -> Tuple[np.ndarray, np.ndarray]:
        return layout.split(solution.x_opt)

    def step(self, x_hat: np.ndarray, alpha_hat: float, p_cov: Optional[np.ndarray] = None) -> MpcStepResult:
        """
        Solve OCP(n) and return the clipped first control.

        With the joint covariance ``p_cov`` of (x, alpha) the peak rows hold at
        alpha_hat + peak_confidence * sigma_alpha as well as at alpha_hat.
        """
        state = self.state
        n = state.step_index
        u_ref = reference_control(self.model, alpha_hat, self.spec.y_peak_ref)
        x_hat = np.asarray(x_hat, dtype=float)
        delta_b, margin = self._hard.builder.confidence_terms(alpha_hat, p_cov)
        self._hard.refresh(alpha_hat, x_hat, state.u_prev, u_ref, n, delta_b, margin)
        solution = self._hard.handle.solve(self._warm)
        flags = set()
        iters, solve_time = solution.iters, solution.solve_time_ns

        if solution.status in (QpStatus.SOLVED, QpStatus.MAX_ITER):
            self._warm = (solution.x_opt, solution.y_opt)
            xs, us = self._extract(solution, self.layout)
            u0 = us[0]
            if solution.status is QpStatus.MAX_ITER:
                flags.add(TraceFlag.MAX_ITER)
                logger.warning(f"Step {n}: QP hit max_iter, applying best iterate")
        else:
            self._warm = None
            flags.add(TraceFlag.FALLBACK)
            logger.warning(f"Step {n}: QP {solution.status.value}, solving soft-constrained fallback")
            self._soft.refresh(alpha_hat, x_hat, state.u_prev, u_ref, n, delta_b, margin)
            fallback = self._soft.handle.solve()
            iters += fallback.iters
            solve_time += fallback.solve_time_ns
            if fallback.status in (QpStatus.SOLVED, QpStatus.MAX_ITER):
                xs, us = self._extract(fallback, self._soft.builder.layout)
                u0 = us[0]
                if fallback.status is QpStatus.MAX_ITER:
                    flags.add(TraceFlag.MAX_ITER)
            else:
                logger.error(f"Step {n}: fallback QP {fallback.status.value}, switching the laser off")
                xs, us = None, None
                u0 = 0.0
                flags.add(TraceFlag.LASER_OFF)

        u_applied = float(min(max(u0, 0.0), self.spec.u_max))
        if u_applied >= self.spec.u_max * (1.0 - 1e-4):
            flags.add(TraceFlag.INPUT_SATURATED)
        if xs is not None:
            peaks = self._hard.builder.confidence_peaks(xs, us, delta_b, margin)
            if np.max(peaks) >= self.spec.y_peak_max - CONSTRAINT_TOL_K:
                flags.add(TraceFlag.CONSTRAINT_ACTIVE)

        self.state = MpcState(u_prev=u_applied, u_ref=u_ref, step_index=n + 1)
        return MpcStepResult(
            u_applied=u_applied,
            u_ref=u_ref,
            status=solution.status,
            iters=iters,
            solve_time_ns=solve_time,
            flags=frozenset(flags),
            x_pred=xs,
            u_plan=us,
        )


def mpc_step(
    controller: MpcController, x_hat: np.ndarray, alpha_hat: float, p_cov: Optional[np.ndarray] = None
) -> MpcStepResult:
    return controller.step(x_hat, alpha_hat, p_cov)
