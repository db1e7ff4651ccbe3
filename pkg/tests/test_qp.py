import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obcbf.acceptance import grid_search_qp, random_qp
from obcbf.dynamics import InputBox
from obcbf.qp import QpProblem, kkt_residual, solve_qp


def qp(target, rows, rhs, u_max):
    t = np.atleast_1d(np.asarray(target, dtype=float))
    return QpProblem(t, np.asarray(rows, dtype=float).reshape(-1, t.size), rhs, InputBox.symmetric(u_max, t.size))


def test_unconstrained_returns_target():
    r = solve_qp(qp([0.3, -0.2], np.zeros((0, 2)), [], 1.0))
    assert r.feasible and np.allclose(r.solution, [0.3, -0.2])


def test_target_outside_box_is_clipped():
    r = solve_qp(qp([3.0, -0.5], np.zeros((0, 2)), [], 1.0))
    assert np.allclose(r.solution, [1.0, -0.5])


def test_single_halfspace_projection():
    r = solve_qp(qp([0.0], [[1.0]], [1.0], 2.0))
    assert r.solution == pytest.approx([1.0])
    r = solve_qp(qp([0.0, 0.0], [[1.0, 1.0]], [1.0], 2.0))
    assert np.allclose(r.solution, [0.5, 0.5])
    assert r.multipliers is not None and np.all(r.multipliers >= 0)


def test_vertex_solution():
    r = solve_qp(qp([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], [0.5, 0.7], 2.0))
    assert np.allclose(r.solution, [0.5, 0.7])
    assert sorted(r.active) == [0, 1]


def test_infeasible_reports_violated_row():
    r = solve_qp(qp([0.0], [[1.0], [1.0]], [0.5, 3.0], 2.0))
    assert not r.feasible and r.solution is None
    assert r.violated_row == 1 and r.phase1_slack > 0


def test_zero_rows_dropped():
    base = solve_qp(qp([0.0, 0.0], [[1.0, 1.0]], [1.0], 2.0))
    extra = solve_qp(qp([0.0, 0.0], [[1.0, 1.0], [0.0, 0.0]], [1.0, -1.0], 2.0))
    assert np.allclose(base.solution, extra.solution)


def test_duplicate_and_parallel_rows():
    r = solve_qp(qp([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]], [1.0, 1.0, 2.0], 2.0))
    assert r.feasible and np.allclose(r.solution, [0.5, 0.5])
    assert kkt_residual(qp([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]], [1.0, 1.0, 2.0], 2.0), r.solution) < 1e-12


def test_problem_validation():
    with pytest.raises(ValueError):
        QpProblem([0.0], [[1.0], [2.0]], [1.0], InputBox.symmetric(1.0))
    with pytest.raises(ValueError):
        QpProblem([0.0, 0.0], np.zeros((0, 2)), [], InputBox.symmetric(1.0))


def test_kkt_residual_flags_wrong_point():
    p = qp([0.0, 0.0], [[1.0, 1.0]], [1.0], 2.0)
    assert kkt_residual(p, np.array([0.5, 0.5])) < 1e-14
    assert kkt_residual(p, np.array([1.0, 0.0])) > 0.1
    assert kkt_residual(p, np.array([0.0, 0.0])) >= 1.0


@given(st.integers(0, 2**32 - 1))
def test_solution_is_a_projection(seed):
    rng = np.random.default_rng(seed)
    p = random_qp(rng)
    r = solve_qp(p)
    if not r.feasible:
        return
    u = r.solution
    assert p.box.contains(u, 1e-9) and np.all(p.slacks(u) >= -1e-9)
    assert kkt_residual(p, u) <= 1e-9
    # variational inequality against random feasible points
    V = rng.uniform(p.box.lower, p.box.upper, size=(2000, p.m))
    if p.constraint_rows.size:
        V = V[np.all(V @ p.constraint_rows.T >= p.constraint_rhs, axis=1)]
    assert np.all((V - u) @ (u - p.target) >= -1e-9)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_matches_grid_search(seed):
    p = random_qp(np.random.default_rng(seed))
    r = solve_qp(p)
    ref = grid_search_qp(p)
    if ref is None:
        # no grid point is feasible: either infeasible or a sliver thinner than the grid
        if r.feasible:
            assert kkt_residual(p, r.solution) <= 1e-9
        return
    assert r.feasible
    f = np.sum((r.solution - p.target) ** 2)
    assert f <= np.sum((ref - p.target) ** 2) + 1e-9
    assert np.linalg.norm(r.solution - ref) <= 1e-4
