import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfcs.qp import QpProblem, QpStatus, kkt_residual, solve_qp
from oracles import enumerate_active_sets, random_qp


def test_unconstrained_identity():
    sol = solve_qp(QpProblem(np.eye(2), np.zeros(2)))
    assert sol.status is QpStatus.OPTIMAL
    assert np.allclose(sol.x, 0.0, atol=1e-9)
    assert sol.objective == pytest.approx(0.0, abs=1e-12)


def test_box_projection():
    sol = solve_qp(QpProblem(np.eye(2), np.zeros(2), lower=[1.0, 1.0]))
    assert np.allclose(sol.x, [1.0, 1.0], atol=1e-9)
    assert sol.objective == pytest.approx(1.0, abs=1e-9)


def test_six_variable_random_qp_matches_enumeration():
    rng = np.random.default_rng(6)
    h, f, aeq, beq, lo, up = random_qp(rng, 6, 2, 5)
    sol = solve_qp(QpProblem(h, f, aeq, beq, lo, up))
    _, best = enumerate_active_sets(h, f, aeq, beq, lo, up)
    assert sol.ok
    assert sol.objective == pytest.approx(best, abs=1e-6)


@given(st.integers(0, 2**31 - 1))
def test_optimal_solutions_satisfy_kkt(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 11))
    meq = int(rng.integers(0, min(n, 4) + 1))
    nbox = int(rng.integers(0, min(n, 6) + 1))
    h, f, aeq, beq, lo, up = random_qp(rng, n, meq, nbox)
    p = QpProblem(h, f, aeq, beq, lo, up)
    sol = solve_qp(p)
    assert sol.ok
    assert np.all(sol.x >= lo) and np.all(sol.x <= up)
    assert np.max(np.abs(aeq @ sol.x - beq), initial=0) <= 1e-8 * max(1, np.abs(beq).max(initial=0))
    assert kkt_residual(p, sol.x, sol.eq_multipliers, sol.bound_multipliers) <= 1e-8
    _, best = enumerate_active_sets(h, f, aeq, beq, lo, up)
    assert sol.objective == pytest.approx(best, abs=1e-6)


def test_infeasible_problem_is_flagged():
    p = QpProblem(np.eye(2), np.zeros(2), [[1.0, 1.0]], [5.0], [0.0, 0.0], [1.0, 1.0])
    assert solve_qp(p).status is QpStatus.INFEASIBLE


def test_fixed_variables_via_equal_bounds():
    p = QpProblem(np.eye(3), -np.ones(3), lower=[2.0, -np.inf, 0.5], upper=[2.0, np.inf, 0.5])
    sol = solve_qp(p)
    assert np.allclose(sol.x, [2.0, 1.0, 0.5], atol=1e-9)


def test_warm_start_reuses_solution():
    rng = np.random.default_rng(4)
    h, f, aeq, beq, lo, up = random_qp(rng, 8, 3, 5)
    p = QpProblem(h, f, aeq, beq, lo, up)
    cold = solve_qp(p)
    warm = solve_qp(p, warm_start=cold)
    assert warm.iterations <= cold.iterations
    assert warm.objective == pytest.approx(cold.objective, abs=1e-9)


def test_offset_enters_objective_only():
    a = solve_qp(QpProblem(np.eye(2), [1.0, -1.0]))
    b = solve_qp(QpProblem(np.eye(2), [1.0, -1.0], offset=3.0))
    assert np.allclose(a.x, b.x)
    assert b.objective == pytest.approx(a.objective + 3.0)


@pytest.mark.parametrize("kwargs, msg", [
    (dict(h=[[1.0, 2.0], [0.0, 1.0]], f=[0, 0]), "symmetric"),
    (dict(h=[[1.0, 0.0], [0.0, -1.0]], f=[0, 0]), "semidefinite"),
    (dict(h=np.eye(2), f=[0, 0], lower=[1, 0], upper=[0, 1]), "lower <= upper"),
    (dict(h=np.eye(2), f=[0, 0], aeq=[[1, 1, 1]], beq=[0]), "columns"),
])
def test_problem_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        QpProblem(**kwargs)


def test_near_symmetric_hessian_is_symmetrised():
    h = np.array([[2.0, 1.0], [1.0 + 1e-14, 2.0]])
    p = QpProblem(h, [0.0, 0.0])
    assert np.array_equal(p.h, p.h.T)
