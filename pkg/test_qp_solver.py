"""
Operator-splitting QP solver.

 Group 1: Setup
   1.  KKT dimension n + m
   2.  invalid data raise QpSetupError

 Group 2: Small problems with known optima
   3.  box-constrained scalar and equality-constrained pair
   4.  random strictly convex QPs against exhaustive active-set enumeration
       and, when installed, against OSQP

 Group 3: Updates
   5.  vector updates do not refactorize unless a row changes type
   6.  value updates match a fresh setup; pattern changes are rejected
   7.  in-place entry updates match a fresh setup and are validated

 Group 4: Status reporting
   8.  primal and dual infeasibility certificates
   9.  max_iter returns the best iterate
  10.  identical inputs give identical outputs; a reused handle leaves
       earlier solutions intact

 Group 5: Warm start
  11.  warm-started solves need no more iterations than cold ones
"""
import numpy as np
import pytest
import scipy.sparse as sparse

from src.config import SolverSettings
from src.exceptions import QpSetupError, QpUpdateError
from src.models import QpStatus
from src.qp_solver import QpProblem, setup, solve, update_matrix_entries, update_matrix_values, update_vectors


TIGHT = SolverSettings(eps_abs=1e-7, eps_rel=1e-7, max_iter=20000)


def _box_problem(lo=0.0, hi=2.0):
    return QpProblem(
        p_mat=sparse.csc_matrix([[1.0]]),
        q_vec=np.array([-3.0]),
        a_con=sparse.csc_matrix([[1.0]]),
        lb=np.array([lo]),
        ub=np.array([hi]),
    )


def _random_problem(rng, n, m):
    root = rng.normal(size=(n, n))
    p = root @ root.T + 0.5 * np.eye(n)
    a = rng.normal(size=(m, n))
    x_feasible = rng.normal(size=n)
    center = a @ x_feasible
    lb = center - rng.uniform(0.1, 1.0, size=m)
    ub = center + rng.uniform(0.1, 1.0, size=m)
    lb[rng.random(m) < 0.3] = -np.inf
    return p, rng.normal(scale=3.0, size=n), a, lb, ub


def _as_problem(p, q, a, lb, ub):
    return QpProblem(sparse.csc_matrix(p), q, sparse.csc_matrix(a), lb, ub)


# ── Group 1: Setup ────────────────────────────────────────────────────────────

def test_kkt_dimension():
    problem = QpProblem(
        p_mat=sparse.identity(2, format="csc"),
        q_vec=np.zeros(2),
        a_con=sparse.csc_matrix([[1.0, 1.0]]),
        lb=np.array([1.0]),
        ub=np.array([1.0]),
    )
    handle = setup(problem)
    assert handle.kkt_shape == (3, 3)
    assert handle.factorizations == 1


@pytest.mark.parametrize(
    "p, a, lb, ub",
    [
        ([[1.0]], [[1.0]], [2.0], [1.0]),
        ([[1.0, 0.0], [0.0, -1.0]], [[1.0, 1.0]], [0.0], [1.0]),
        ([[1.0, 1.0], [0.0, 1.0]], [[1.0, 1.0]], [0.0], [1.0]),
        ([[1.0]], [[1.0, 1.0]], [0.0], [1.0]),
        ([[1.0]], [[1.0]], [0.0, 0.0], [1.0, 1.0]),
        ([[1.0]], [[1.0]], [np.nan], [1.0]),
    ],
)
def test_invalid_setup(p, a, lb, ub):
    n = len(p)
    problem = QpProblem(sparse.csc_matrix(p), np.zeros(n), sparse.csc_matrix(a), np.array(lb), np.array(ub))
    with pytest.raises(QpSetupError):
        setup(problem)


def test_no_constraints_rejected():
    problem = QpProblem(sparse.identity(2, format="csc"), np.zeros(2), sparse.csc_matrix((0, 2)), np.zeros(0), np.zeros(0))
    with pytest.raises(QpSetupError):
        setup(problem)


# ── Group 2: Small problems with known optima ─────────────────────────────────

def test_box_constrained_scalar():
    problem = _box_problem()
    problem.constant = 4.5
    sol = solve(setup(problem, TIGHT))
    assert sol.status is QpStatus.SOLVED
    assert sol.x_opt[0] == pytest.approx(2.0, abs=1e-5)
    assert sol.y_opt[0] == pytest.approx(1.0, abs=1e-4)
    assert sol.objective == pytest.approx(0.5, abs=1e-4)
    assert sol.objective == pytest.approx(problem.objective(sol.x_opt), rel=1e-12)


def test_equality_constrained_pair():
    problem = QpProblem(
        p_mat=sparse.identity(2, format="csc"),
        q_vec=np.zeros(2),
        a_con=sparse.csc_matrix([[1.0, 1.0]]),
        lb=np.array([1.0]),
        ub=np.array([1.0]),
    )
    sol = solve(setup(problem, TIGHT))
    assert sol.status is QpStatus.SOLVED
    np.testing.assert_allclose(sol.x_opt, [0.5, 0.5], atol=1e-5)


def test_random_problems_match_enumeration(kkt_oracle):
    rng = np.random.default_rng(5)
    for _ in range(50):
        n, m = int(rng.integers(2, 7)), int(rng.integers(1, 7))
        p, q, a, lb, ub = _random_problem(rng, n, m)
        x_star, obj_star = kkt_oracle(p, q, a, lb, ub)
        assert x_star is not None
        sol = solve(setup(_as_problem(p, q, a, lb, ub), TIGHT))
        assert sol.status is QpStatus.SOLVED
        np.testing.assert_allclose(sol.x_opt, x_star, atol=1e-4)
        assert sol.objective == pytest.approx(obj_star, abs=1e-4 * max(1.0, abs(obj_star)))


def test_larger_problems_match_osqp():
    osqp = pytest.importorskip("osqp")
    rng = np.random.default_rng(11)
    for _ in range(10):
        p, q, a, lb, ub = _random_problem(rng, 10, 15)
        reference = osqp.OSQP()
        reference.setup(
            sparse.triu(sparse.csc_matrix(p), format="csc"), q, sparse.csc_matrix(a), lb, ub,
            eps_abs=1e-8, eps_rel=1e-8, max_iter=200000, verbose=False,
        )
        expected = reference.solve()
        assert expected.info.status == "solved"
        sol = solve(setup(_as_problem(p, q, a, lb, ub), TIGHT))
        assert sol.status is QpStatus.SOLVED
        np.testing.assert_allclose(sol.x_opt, expected.x, atol=1e-4)


# ── Group 3: Updates ──────────────────────────────────────────────────────────

def test_vector_update_matches_fresh_setup():
    rng = np.random.default_rng(6)
    p, q, a, lb, ub = _random_problem(rng, 4, 5)
    handle = setup(_as_problem(p, q, a, lb, ub), TIGHT)
    solve(handle)
    q_new = rng.normal(scale=3.0, size=4)
    lb_new, ub_new = lb - 0.1, ub + 0.2
    count = handle.factorizations
    update_vectors(handle, q_vec=q_new, lb=lb_new, ub=ub_new)
    assert handle.factorizations == count

    updated = solve(handle)
    fresh = solve(setup(_as_problem(p, q_new, a, lb_new, ub_new), TIGHT))
    assert updated.status is fresh.status is QpStatus.SOLVED
    np.testing.assert_allclose(updated.x_opt, fresh.x_opt, atol=1e-5)


def test_row_type_change_refactorizes():
    handle = setup(_box_problem(), TIGHT)
    count = handle.factorizations
    update_vectors(handle, lb=np.array([1.5]), ub=np.array([1.5]))
    assert handle.factorizations == count + 1
    sol = solve(handle)
    assert sol.x_opt[0] == pytest.approx(1.5, abs=1e-5)


def test_vector_update_rejects_bad_bounds():
    handle = setup(_box_problem())
    with pytest.raises(QpUpdateError):
        update_vectors(handle, lb=np.array([3.0]), ub=np.array([1.0]))
    with pytest.raises(QpUpdateError):
        update_vectors(handle, q_vec=np.zeros(3))


def test_identical_value_update_keeps_solution():
    rng = np.random.default_rng(7)
    p, q, a, lb, ub = _random_problem(rng, 4, 4)
    handle = setup(_as_problem(p, q, a, lb, ub), TIGHT)
    first = solve(handle)
    update_matrix_values(handle, p_mat=sparse.csc_matrix(p), a_con=sparse.csc_matrix(a))
    second = solve(handle)
    np.testing.assert_allclose(second.x_opt, first.x_opt, atol=1e-5)


def test_value_update_matches_fresh_setup():
    rng = np.random.default_rng(8)
    p, q, a, lb, ub = _random_problem(rng, 4, 4)
    handle = setup(_as_problem(p, q, a, lb, ub), TIGHT)
    solve(handle)
    p_new = 2.0 * p
    a_new = a * rng.uniform(0.5, 1.5, size=a.shape)
    update_matrix_values(handle, p_mat=sparse.csc_matrix(p_new), a_con=sparse.csc_matrix(a_new))
    updated = solve(handle)
    fresh = solve(setup(_as_problem(p_new, q, a_new, lb, ub), TIGHT))
    np.testing.assert_allclose(updated.x_opt, fresh.x_opt, atol=1e-5)


def test_pattern_change_rejected():
    problem = QpProblem(
        p_mat=sparse.identity(2, format="csc"),
        q_vec=np.zeros(2),
        a_con=sparse.csc_matrix([[1.0, 0.0]]),
        lb=np.array([0.0]),
        ub=np.array([1.0]),
    )
    handle = setup(problem)
    with pytest.raises(QpUpdateError):
        update_matrix_values(handle, p_mat=sparse.csc_matrix([[1.0, 0.5], [0.5, 1.0]]))
    with pytest.raises(QpUpdateError):
        update_matrix_values(handle, a_con=sparse.csc_matrix([[1.0, 1.0]]))
    with pytest.raises(QpUpdateError):
        update_matrix_values(handle, p_mat=sparse.diags([1.0, -1.0], format="csc"))


def test_entry_update_matches_fresh_setup():
    rng = np.random.default_rng(14)
    p, q, a, lb, ub = _random_problem(rng, 4, 5)
    handle = setup(_as_problem(p, q, a, lb, ub), TIGHT)
    solve(handle)
    count = handle.factorizations
    # stored entries of a dense CSC matrix run column by column
    rows, cols = np.array([0, 3, 4]), np.array([1, 1, 2])
    a_new = a.copy()
    a_new[rows, cols] *= 1.5
    update_matrix_entries(handle, a_values=a_new[rows, cols], a_index=cols * a.shape[0] + rows)
    assert handle.factorizations == count + 1
    np.testing.assert_array_equal(handle.problem().a_con.toarray(), a_new)
    updated = solve(handle)
    fresh = solve(setup(_as_problem(p, q, a_new, lb, ub), TIGHT))
    np.testing.assert_allclose(updated.x_opt, fresh.x_opt, atol=1e-5)

    update_matrix_entries(handle, p_values=3.0 * p.ravel(order="F"))
    fresh = solve(setup(_as_problem(3.0 * p, q, a_new, lb, ub), TIGHT))
    np.testing.assert_allclose(solve(handle).x_opt, fresh.x_opt, atol=1e-5)


def test_entry_update_rejects_bad_values():
    rng = np.random.default_rng(15)
    p, q, a, lb, ub = _random_problem(rng, 3, 3)
    handle = setup(_as_problem(p, q, a, lb, ub))
    count = handle.factorizations
    update_matrix_entries(handle)
    assert handle.factorizations == count
    with pytest.raises(QpUpdateError):
        update_matrix_entries(handle, a_values=[1.0, 2.0], a_index=[0])
    with pytest.raises(QpUpdateError):
        update_matrix_entries(handle, a_values=[1.0], a_index=[handle.a_nnz])
    with pytest.raises(QpUpdateError):
        update_matrix_entries(handle, a_values=[np.nan], a_index=[0])
    with pytest.raises(QpUpdateError):
        update_matrix_entries(handle, p_values=[-10.0], p_index=[0])
    np.testing.assert_array_equal(handle.problem().p_mat.toarray(), p)
    np.testing.assert_array_equal(handle.problem().a_con.toarray(), a)


# ── Group 4: Status reporting ─────────────────────────────────────────────────

def test_primal_infeasible_after_bound_update():
    problem = QpProblem(
        p_mat=sparse.csc_matrix([[1.0]]),
        q_vec=np.zeros(1),
        a_con=sparse.csc_matrix([[1.0], [1.0]]),
        lb=np.array([0.0, -np.inf]),
        ub=np.array([np.inf, 1.0]),
    )
    handle = setup(problem)
    assert solve(handle).status is QpStatus.SOLVED
    count = handle.factorizations
    update_vectors(handle, lb=np.array([1.0, -np.inf]), ub=np.array([np.inf, 0.0]))
    assert handle.factorizations == count
    assert solve(handle).status is QpStatus.PRIMAL_INFEASIBLE


def test_dual_infeasible():
    problem = QpProblem(
        p_mat=sparse.csc_matrix((1, 1)),
        q_vec=np.array([-1.0]),
        a_con=sparse.csc_matrix([[1.0]]),
        lb=np.array([0.0]),
        ub=np.array([np.inf]),
    )
    assert solve(setup(problem)).status is QpStatus.DUAL_INFEASIBLE


def test_max_iter_returns_best_iterate():
    sol = solve(setup(_box_problem(), SolverSettings(max_iter=1)))
    assert sol.status is QpStatus.MAX_ITER
    assert sol.iters == 1
    assert np.all(np.isfinite(sol.x_opt))
    assert np.isfinite(sol.prim_res) and np.isfinite(sol.dual_res)


def test_deterministic():
    rng = np.random.default_rng(9)
    data = _random_problem(rng, 5, 5)
    first = solve(setup(_as_problem(*data)))
    second = solve(setup(_as_problem(*data)))
    np.testing.assert_array_equal(first.x_opt, second.x_opt)
    np.testing.assert_array_equal(first.y_opt, second.y_opt)
    assert first.iters == second.iters


def test_reused_handle_leaves_earlier_solutions_intact():
    rng = np.random.default_rng(11)
    problem = _as_problem(*_random_problem(rng, 5, 5))
    handle = setup(problem, TIGHT)
    first = solve(handle)
    kept_x, kept_y = first.x_opt.copy(), first.y_opt.copy()
    second = solve(handle)
    third = solve(handle, warm_start=(second.x_opt, second.y_opt))
    np.testing.assert_array_equal(first.x_opt, kept_x)
    np.testing.assert_array_equal(first.y_opt, kept_y)
    fresh = solve(setup(problem, TIGHT))
    for sol in (second, third):
        assert sol.status is QpStatus.SOLVED
        np.testing.assert_allclose(sol.x_opt, fresh.x_opt, atol=1e-5)

    capped = setup(problem, SolverSettings(max_iter=20, check_interval=10))
    early = solve(capped)
    kept = early.x_opt.copy()
    solve(capped)
    np.testing.assert_array_equal(early.x_opt, kept)


# ── Group 5: Warm start ───────────────────────────────────────────────────────

def test_warm_start_saves_iterations():
    rng = np.random.default_rng(10)
    p, q, a, lb, ub = _random_problem(rng, 5, 5)
    base = solve(setup(_as_problem(p, q, a, lb, ub), TIGHT))
    assert base.status is QpStatus.SOLVED
    better = 0
    for _ in range(100):
        q_near = q * (1.0 + 0.01 * rng.normal(size=q.size))
        problem = _as_problem(p, q_near, a, lb, ub)
        cold = solve(setup(problem, TIGHT))
        warm = solve(setup(problem, TIGHT), warm_start=(base.x_opt, base.y_opt))
        np.testing.assert_allclose(warm.x_opt, cold.x_opt, atol=1e-4)
        better += warm.iters <= cold.iters
    assert better >= 80
