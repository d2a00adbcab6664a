"""
Embedded operator-splitting (ADMM) solver for convex QPs

    minimize    1/2 x^T P x + q^T x
    subject to  lb <= A x <= ub

The quasi-definite KKT matrix [P + sigma I, A^T; A, -diag(1/rho)] is factorized
at setup and reused; vector updates never refactorize, value updates with an
unchanged sparsity pattern do. The data are Ruiz-equilibrated once at setup.

The KKT pattern is fixed at setup as well: a refactorization only scatters the
current values into it, so changing a few entries of P or A costs one scatter
and one LU, never a reassembly.
"""
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import splu

from .config import SolverSettings
from .exceptions import NumericalError, QpSetupError, QpUpdateError
from .models import QpStatus
from .utils.logger import get_logger

logger = get_logger(__name__)

RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_SCALE = 1e3
EQ_TOL = 1e-4
MIN_SCALING = 1e-4
MAX_SCALING = 1e4
PSD_TOL = 1e-9


@dataclass
class QpProblem:
    """QP data; ``constant`` is added to the reported objective only."""
    p_mat: sparse.spmatrix
    q_vec: np.ndarray
    a_con: sparse.spmatrix
    lb: np.ndarray
    ub: np.ndarray
    constant: float = 0.0

    @property
    def n_var(self) -> int:
        return self.p_mat.shape[0]

    @property
    def n_con(self) -> int:
        return self.a_con.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.p_mat @ x) + self.q_vec @ x + self.constant)


@dataclass
class QpSolution:
    x_opt: np.ndarray
    y_opt: np.ndarray
    status: QpStatus
    iters: int
    solve_time_ns: int
    prim_res: float = np.inf
    dual_res: float = np.inf
    objective: float = np.nan


def _csc(mat) -> sparse.csc_matrix:
    out = sparse.csc_matrix(mat, dtype=float, copy=True)
    out.sort_indices()
    return out


def _coords(mat: sparse.csc_matrix) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column of every stored entry."""
    cols = np.repeat(np.arange(mat.shape[1]), np.diff(mat.indptr))
    return mat.indices.copy(), cols


def _col_norms(mat: sparse.spmatrix) -> np.ndarray:
    return np.asarray(abs(mat).max(axis=0).todense()).ravel()


def _row_norms(mat: sparse.spmatrix) -> np.ndarray:
    return np.asarray(abs(mat).max(axis=1).todense()).ravel()


def _limit(values):
    values = np.where(values < MIN_SCALING, 1.0, values)
    return np.minimum(values, MAX_SCALING)


def _inf_norm(v: np.ndarray) -> float:
    return float(max(v.max(initial=0.0), -v.min(initial=0.0)))


def _check_psd(p_mat: sparse.csc_matrix, error=QpSetupError) -> None:
    if p_mat.shape[0] != p_mat.shape[1]:
        raise error(f"P must be square, got {p_mat.shape}")
    dense = p_mat.toarray()
    scale = max(1.0, float(np.abs(dense).max(initial=0.0)))
    if np.abs(dense - dense.T).max(initial=0.0) > 1e-12 * scale:
        raise error("P is not symmetric")
    if dense.size and np.linalg.eigvalsh(dense).min() < -PSD_TOL * scale:
        raise error("P is not positive semidefinite")


def _check_bounds(lb: np.ndarray, ub: np.ndarray, m: int, error) -> None:
    if lb.shape != (m,) or ub.shape != (m,):
        raise error(f"bounds must have shape ({m},), got {lb.shape} and {ub.shape}")
    if np.any(np.isnan(lb)) or np.any(np.isnan(ub)):
        raise error("bounds contain NaN")
    bad = np.flatnonzero(lb > ub)
    if bad.size:
        raise error(f"lb > ub in rows {bad[:10].tolist()}")


def _entry_values(values, index, size: int, name: str) -> Tuple[np.ndarray, np.ndarray]:
    """Validated (positions, values) of a partial update of ``size`` stored entries."""
    values = np.asarray(values, dtype=float).ravel()
    index = np.arange(size) if index is None else np.asarray(index, dtype=np.intp).ravel()
    if values.shape != index.shape:
        raise QpUpdateError(f"{name} update has {values.size} values for {index.size} positions")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise QpUpdateError(f"{name} update indexes outside the {size} stored entries")
    if not np.all(np.isfinite(values)):
        raise QpUpdateError(f"{name} update contains non-finite values")
    return index, values


class _KktPattern:
    """Fixed CSC pattern of the KKT matrix and the scatter from its building blocks."""

    def __init__(self, n: int, m: int, p_coords, a_coords):
        p_rows, p_cols = p_coords
        a_rows, a_cols = a_coords
        diag_n, diag_m = np.arange(n), np.arange(m)
        rows = np.concatenate([p_rows, diag_n, a_cols, n + a_rows, n + diag_m])
        cols = np.concatenate([p_cols, diag_n, n + a_rows, a_cols, n + diag_m])
        size = n + m
        keys, self._inverse = np.unique(cols.astype(np.int64) * size + rows, return_inverse=True)
        self.indices = (keys % size).astype(np.int32)
        self.indptr = np.searchsorted(keys // size, np.arange(size + 1)).astype(np.int32)
        self.shape = (size, size)
        self.nnz = keys.size
        self._values = np.empty(rows.size)
        # segment ends inside the stacked values
        self._ends = np.cumsum([len(p_rows), n, len(a_rows), len(a_rows), m])

    def assemble(self, p_data, sigma: float, a_data, rho_inv) -> sparse.csc_matrix:
        v = self._values
        e0, e1, e2, e3, e4 = self._ends
        v[:e0] = p_data
        v[e0:e1] = sigma
        v[e1:e2] = a_data
        v[e2:e3] = a_data
        v[e3:e4] = -rho_inv
        data = np.bincount(self._inverse, weights=v, minlength=self.nnz)
        return sparse.csc_matrix((data, self.indices, self.indptr), shape=self.shape)


class SolverHandle:
    """Factorized problem with persistent penalty and scaling, reusable across solves."""

    def __init__(self, problem: QpProblem, settings: SolverSettings = SolverSettings()):
        self.settings = settings
        self._p = _csc(problem.p_mat)
        self._a = _csc(problem.a_con)
        self.n, self.m = self._p.shape[0], self._a.shape[0]
        if self.n < 1 or self.m < 1:
            raise QpSetupError("need at least one variable and one constraint row")
        if self._a.shape[1] != self.n:
            raise QpSetupError(f"A has {self._a.shape[1]} columns, expected {self.n}")
        _check_psd(self._p)
        self._q = np.array(problem.q_vec, dtype=float)
        if self._q.shape != (self.n,):
            raise QpSetupError(f"q must have shape ({self.n},), got {self._q.shape}")
        self._lb = np.array(problem.lb, dtype=float)
        self._ub = np.array(problem.ub, dtype=float)
        _check_bounds(self._lb, self._ub, self.m, QpSetupError)
        self.constant = float(problem.constant)

        self._p_rows, self._p_cols = _coords(self._p)
        self._a_rows, self._a_cols = _coords(self._a)
        self._kkt = _KktPattern(self.n, self.m, (self._p_rows, self._p_cols), (self._a_rows, self._a_cols))
        self._equilibrate()
        self._p_bar = self._p.copy()
        self._a_bar = self._a.copy()
        # CSR view sharing the data of _a_bar, stays current under in-place scaling
        self._a_bar_t = self._a_bar.T
        self._scale_matrices()
        self._scale_vectors()

        self.rho = settings.rho
        self._row_kind = self._classify_rows()
        self._set_rho_vector()
        self.factorizations = 0
        self._factorize()

        n, m = self.n, self.m
        self._x = np.zeros(n)
        self._z = np.zeros(m)
        self._y = np.zeros(m)
        self._x_prev = np.zeros(n)
        self._y_prev = np.zeros(m)
        self._rhs = np.zeros(n + m)
        self._z_tilde = np.zeros(m)
        self._work_n = np.zeros(n)
        self._work_m = np.zeros(m)
        self._best_x = np.zeros(n)
        self._best_y = np.zeros(m)
        logger.debug(
            f"QP setup: n_var={n}, n_con={m}, nnz(P)={self._p.nnz}, nnz(A)={self._a.nnz}, nnz(KKT)={self._kkt.nnz}"
        )

    @property
    def kkt_shape(self) -> Tuple[int, int]:
        return (self.n + self.m, self.n + self.m)

    @property
    def p_nnz(self) -> int:
        return self._p.nnz

    @property
    def a_nnz(self) -> int:
        return self._a.nnz

    def problem(self) -> QpProblem:
        """Current unscaled data."""
        return QpProblem(self._p.copy(), self._q.copy(), self._a.copy(), self._lb.copy(), self._ub.copy(), self.constant)

    def _equilibrate(self) -> None:
        """Ruiz equilibration of the KKT matrix, then cost scaling."""
        d = np.ones(self.n)
        e = np.ones(self.m)
        p, a, q = self._p.copy(), self._a.copy(), self._q.copy()
        for _ in range(self.settings.scaling_iters):
            delta_d = 1.0 / np.sqrt(_limit(np.maximum(_col_norms(p), _col_norms(a))))
            delta_e = 1.0 / np.sqrt(_limit(_row_norms(a)))
            dd, de = sparse.diags(delta_d), sparse.diags(delta_e)
            p = (dd @ p @ dd).tocsc()
            a = (de @ a @ dd).tocsc()
            q = delta_d * q
            d *= delta_d
            e *= delta_e
        cost = max(float(np.mean(_col_norms(p))), float(np.abs(q).max(initial=0.0)))
        self._d, self._e = d, e
        self._d_inv, self._e_inv = 1.0 / d, 1.0 / e
        self._c = 1.0 / float(_limit(np.array([cost]))[0])
        self._p_scale = self._c * d[self._p_rows] * d[self._p_cols]
        self._a_scale = e[self._a_rows] * d[self._a_cols]

    def _scale_matrices(self) -> None:
        np.multiply(self._p_scale, self._p.data, out=self._p_bar.data)
        np.multiply(self._a_scale, self._a.data, out=self._a_bar.data)

    def _scale_vectors(self) -> None:
        self._q_bar = self._c * self._d * self._q
        self._l_bar = self._e * self._lb
        self._u_bar = self._e * self._ub
        self._q_bar_norm = _inf_norm(self._d_inv * self._q_bar)

    def _classify_rows(self) -> np.ndarray:
        """0 = inequality, 1 = equality, -1 = free."""
        kind = np.zeros(self.m, dtype=np.int8)
        kind[np.isinf(self._lb) & np.isinf(self._ub)] = -1
        kind[(self._ub - self._lb) < EQ_TOL] = 1
        return kind

    def _set_rho_vector(self) -> None:
        rho = np.full(self.m, self.rho)
        rho[self._row_kind == 1] = RHO_EQ_SCALE * self.rho
        rho[self._row_kind == -1] = RHO_MIN
        self._rho_vec = rho
        self._rho_inv = 1.0 / rho

    def _factorize(self) -> None:
        kkt = self._kkt.assemble(self._p_bar.data, self.settings.sigma, self._a_bar.data, self._rho_inv)
        try:
            self._lu = splu(kkt)
        except RuntimeError as e:
            raise NumericalError(f"KKT factorization failed: {e}") from e
        self.factorizations += 1

    def update_vectors(self, q_vec=None, lb=None, ub=None) -> None:
        """Replace q and/or bounds; refactorizes only if a row changes between equality and inequality."""
        if q_vec is not None:
            q_vec = np.asarray(q_vec, dtype=float)
            if q_vec.shape != (self.n,):
                raise QpUpdateError(f"q must have shape ({self.n},), got {q_vec.shape}")
            self._q[:] = q_vec
        new_lb = self._lb if lb is None else np.asarray(lb, dtype=float)
        new_ub = self._ub if ub is None else np.asarray(ub, dtype=float)
        if lb is not None or ub is not None:
            _check_bounds(new_lb, new_ub, self.m, QpUpdateError)
            self._lb[:] = new_lb
            self._ub[:] = new_ub
        self._scale_vectors()
        kind = self._classify_rows()
        if not np.array_equal(kind, self._row_kind):
            self._row_kind = kind
            self._set_rho_vector()
            self._factorize()

    def _same_pattern(self, new, old: sparse.csc_matrix, name: str) -> sparse.csc_matrix:
        new = _csc(new)
        if (
            new.shape != old.shape
            or not np.array_equal(new.indptr, old.indptr)
            or not np.array_equal(new.indices, old.indices)
        ):
            raise QpUpdateError(f"{name} update changes the sparsity pattern")
        return new

    def update_matrix_values(self, p_mat=None, a_con=None) -> None:
        """Replace the values of P and/or A with an identical sparsity pattern; refactorizes."""
        p_values = None if p_mat is None else self._same_pattern(p_mat, self._p, "P").data
        a_values = None if a_con is None else self._same_pattern(a_con, self._a, "A").data
        self.update_matrix_entries(p_values=p_values, a_values=a_values)

    def update_matrix_entries(self, p_values=None, p_index=None, a_values=None, a_index=None) -> None:
        """
        Overwrite stored entries of P and/or A in place and refactorize once.

        ``*_index`` are positions into the CSC data arrays of the setup matrices,
        in the order of their (sorted) stored entries; None means all of them.
        """
        if p_values is None and a_values is None:
            return
        if p_values is not None:
            index, values = _entry_values(p_values, p_index, self._p.nnz, "P")
            p_new = self._p.copy()
            p_new.data[index] = values
            _check_psd(p_new, QpUpdateError)
            self._p.data[:] = p_new.data
        if a_values is not None:
            index, values = _entry_values(a_values, a_index, self._a.nnz, "A")
            self._a.data[index] = values
        self._scale_matrices()
        self._factorize()

    def _set_start(self, warm_start: Optional[Tuple[np.ndarray, np.ndarray]]) -> None:
        if warm_start is None:
            self._x.fill(0.0)
            self._z.fill(0.0)
            self._y.fill(0.0)
            return
        x0, y0 = (np.asarray(v, dtype=float) for v in warm_start)
        if x0.shape != (self.n,) or y0.shape != (self.m,):
            raise QpUpdateError("warm start has the wrong shape")
        np.multiply(self._d_inv, x0, out=self._x)
        np.multiply(self._c * self._e_inv, y0, out=self._y)
        self._z[:] = self._a_bar @ self._x

    def _residuals(self):
        x, z = self._x, self._z
        ax = self._a_bar @ x
        px = self._p_bar @ x
        aty = self._a_bar_t @ self._y
        wn, wm = self._work_n, self._work_m
        e_inv, d_inv, c_inv = self._e_inv, self._d_inv, 1.0 / self._c
        s = self.settings

        np.subtract(ax, z, out=wm)
        # scaled quantities for the penalty update
        prim_ratio = _inf_norm(wm) / max(_inf_norm(ax), _inf_norm(z), 1e-30)
        wm *= e_inv
        prim = _inf_norm(wm)
        np.multiply(e_inv, ax, out=wm)
        ax_norm = _inf_norm(wm)
        np.multiply(e_inv, z, out=wm)
        eps_prim = s.eps_abs + s.eps_rel * max(ax_norm, _inf_norm(wm))

        np.add(px, self._q_bar, out=wn)
        wn += aty
        dual_ratio = _inf_norm(wn) / max(_inf_norm(px), _inf_norm(aty), _inf_norm(self._q_bar), 1e-30)
        wn *= d_inv
        dual = c_inv * _inf_norm(wn)
        np.multiply(d_inv, px, out=wn)
        px_norm = _inf_norm(wn)
        np.multiply(d_inv, aty, out=wn)
        eps_dual = s.eps_abs + s.eps_rel * c_inv * max(px_norm, _inf_norm(wn), self._q_bar_norm)
        return prim, eps_prim, dual, eps_dual, prim_ratio, dual_ratio

    def _primal_infeasible(self) -> bool:
        dy_bar = self._y - self._y_prev
        dy = self._e * dy_bar
        norm = np.abs(dy).max()
        if norm < 1e-30:
            return False
        eps = self.settings.eps_prim_inf * norm
        if np.abs(self._d_inv * (self._a_bar_t @ dy_bar)).max() > eps:
            return False
        pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
        upper_inf, lower_inf = np.isinf(self._ub), np.isinf(self._lb)
        if np.any(upper_inf & (pos > eps)) or np.any(lower_inf & (neg < -eps)):
            return False
        support = np.where(upper_inf, 0.0, self._ub) @ pos + np.where(lower_inf, 0.0, self._lb) @ neg
        return bool(support < -eps)

    def _dual_infeasible(self) -> bool:
        dx_bar = self._x - self._x_prev
        norm = np.abs(self._d * dx_bar).max()
        if norm < 1e-30:
            return False
        eps = self.settings.eps_dual_inf * norm
        c_inv = 1.0 / self._c
        if c_inv * np.abs(self._d_inv * (self._p_bar @ dx_bar)).max() > eps:
            return False
        if c_inv * (self._q_bar @ dx_bar) > -eps:
            return False
        adx = self._e_inv * (self._a_bar @ dx_bar)
        upper_ok = np.isinf(self._ub) | (adx <= eps)
        lower_ok = np.isinf(self._lb) | (adx >= -eps)
        return bool(np.all(upper_ok & lower_ok))

    def _adapt_rho(self, prim_ratio: float, dual_ratio: float) -> None:
        rho_new = self.rho * np.sqrt(prim_ratio / max(dual_ratio, 1e-30))
        rho_new = float(np.clip(rho_new, RHO_MIN, RHO_MAX))
        tol = self.settings.adaptive_rho_tolerance
        if rho_new > tol * self.rho or rho_new < self.rho / tol:
            self.rho = rho_new
            self._set_rho_vector()
            self._factorize()

    def solve(self, warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> QpSolution:
        """Run ADMM from ``warm_start`` = (x, y), or from zeros."""
        start = time.perf_counter_ns()
        s = self.settings
        n = self.n
        self._set_start(warm_start)
        x, z, y = self._x, self._z, self._y
        x_prev, y_prev, rhs = self._x_prev, self._y_prev, self._rhs
        rhs_x, rhs_z = rhs[:n], rhs[n:]
        z_tilde, work = self._z_tilde, self._work_m
        best_x, best_y = self._best_x, self._best_y
        relax = s.relax

        status = QpStatus.MAX_ITER
        best_merit, best_prim, best_dual = np.inf, np.inf, np.inf
        iters = 0
        prim = dual = np.inf
        for k in range(1, s.max_iter + 1):
            iters = k
            check = k % s.check_interval == 0 or k == s.max_iter
            if check:
                x_prev[:] = x
                y_prev[:] = y
            rho, rho_inv = self._rho_vec, self._rho_inv
            np.multiply(s.sigma, x, out=rhs_x)
            rhs_x -= self._q_bar
            np.multiply(y, rho_inv, out=rhs_z)
            np.subtract(z, rhs_z, out=rhs_z)
            sol = self._lu.solve(rhs)
            x_tilde, nu = sol[:n], sol[n:]
            # z_tilde = z + (nu - y) / rho
            np.subtract(nu, y, out=z_tilde)
            z_tilde *= rho_inv
            z_tilde += z
            x *= 1.0 - relax
            x_tilde *= relax
            x += x_tilde
            # relaxed z, kept in z_tilde
            z_tilde *= relax
            np.multiply(z, 1.0 - relax, out=work)
            z_tilde += work
            np.multiply(y, rho_inv, out=work)
            work += z_tilde
            np.clip(work, self._l_bar, self._u_bar, out=z)
            np.subtract(z_tilde, z, out=work)
            work *= rho
            y += work

            if not check:
                continue
            prim, eps_prim, dual, eps_dual, prim_ratio, dual_ratio = self._residuals()
            if prim <= eps_prim and dual <= eps_dual:
                status = QpStatus.SOLVED
                break
            if self._primal_infeasible():
                status = QpStatus.PRIMAL_INFEASIBLE
                break
            if self._dual_infeasible():
                status = QpStatus.DUAL_INFEASIBLE
                break
            merit = max(prim / max(eps_prim, 1e-30), dual / max(eps_dual, 1e-30))
            if merit < best_merit:
                best_merit, best_prim, best_dual = merit, prim, dual
                best_x[:] = x
                best_y[:] = y
            if s.adaptive_rho and k != s.max_iter:
                self._adapt_rho(prim_ratio, dual_ratio)

        if status is QpStatus.MAX_ITER and np.isfinite(best_merit):
            x_out, y_out, prim, dual = best_x, best_y, best_prim, best_dual
        else:
            x_out, y_out = x, y
        x_opt = self._d * x_out
        y_opt = self._e * y_out / self._c
        elapsed = time.perf_counter_ns() - start
        return QpSolution(
            x_opt=x_opt,
            y_opt=y_opt,
            status=status,
            iters=iters,
            solve_time_ns=elapsed,
            prim_res=prim,
            dual_res=dual,
            objective=float(0.5 * x_opt @ (self._p @ x_opt) + self._q @ x_opt + self.constant),
        )


def setup(problem: QpProblem, settings: SolverSettings = SolverSettings()) -> SolverHandle:
    return SolverHandle(problem, settings)


def update_vectors(handle: SolverHandle, q_vec=None, lb=None, ub=None) -> None:
    handle.update_vectors(q_vec=q_vec, lb=lb, ub=ub)


def update_matrix_values(handle: SolverHandle, p_mat=None, a_con=None) -> None:
    handle.update_matrix_values(p_mat=p_mat, a_con=a_con)


def update_matrix_entries(handle: SolverHandle, p_values=None, p_index=None, a_values=None, a_index=None) -> None:
    handle.update_matrix_entries(p_values=p_values, p_index=p_index, a_values=a_values, a_index=a_index)


def solve(handle: SolverHandle, warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> QpSolution:
    return handle.solve(warm_start)
