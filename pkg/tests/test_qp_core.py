import numpy as np
import pytest

from gridshed.qp_core import QpProblem, kkt_residual, solve_qp

# optima of the three seeded problems below, from an interior-point solve at
# gtol 1e-12 (independent implementation)
REFERENCE_OBJECTIVES = [0.4203113594354352, 1.1507725880942747, 0.17786714674641563]


def seeded_problems():
    rng = np.random.default_rng(20240817)
    out = []
    for n, m in [(4, 2), (6, 3), (8, 0)]:
        M = rng.normal(size=(n, n))
        Q = -(M @ M.T) - 0.5 * np.eye(n)
        g = rng.normal(size=n)
        A = rng.normal(size=(m, n)) if m else np.zeros((0, n))
        b = rng.uniform(0.2, 1.0, size=m)
        out.append(QpProblem(Q=Q, g_lin=g, A=A, b=b, lower=np.zeros(n), upper=np.ones(n)))
    return out


def box_problem(Q, g, lower=0.0, upper=1.0):
    n = len(g)
    return QpProblem(
        Q=np.atleast_2d(Q), g_lin=np.asarray(g, float), A=np.zeros((0, n)),
        b=np.zeros(0), lower=np.full(n, lower), upper=np.full(n, upper),
    )


def objective(problem, d):
    return 0.5 * d @ problem.Q @ d + problem.g_lin @ d


def assert_kkt(problem, sol):
    assert sol.status == "optimal"
    assert np.all(problem.lower - sol.primal <= 1e-9)
    assert np.all(sol.primal - problem.upper <= 1e-9)
    if problem.A.shape[0]:
        assert np.all(problem.b + problem.A @ sol.primal >= -1e-9)
        assert np.all(sol.dual_ineq >= -1e-9)
    assert np.all(sol.dual_lower >= -1e-9)
    assert np.all(sol.dual_upper >= -1e-9)
    assert sol.kkt_residual <= 1e-8
    stat = (problem.Q @ sol.primal + problem.g_lin
            + problem.A.T @ sol.dual_ineq + sol.dual_lower - sol.dual_upper)
    assert np.max(np.abs(stat)) <= 1e-8


def test_interior_optimum():
    sol = solve_qp(box_problem([[-1.0]], [0.3]))
    assert sol.primal[0] == pytest.approx(0.3, abs=1e-9)
    assert sol.dual_lower[0] == pytest.approx(0.0, abs=1e-9)
    assert sol.dual_upper[0] == pytest.approx(0.0, abs=1e-9)
    assert_kkt(box_problem([[-1.0]], [0.3]), sol)


def test_active_upper_bound_dual():
    problem = box_problem([[-1.0]], [2.0])
    sol = solve_qp(problem)
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-9)
    # stationarity -y + 2 - gamma = 0 at y = 1
    assert sol.dual_upper[0] == pytest.approx(1.0, abs=1e-8)
    assert_kkt(problem, sol)


def test_convex_objective_reaches_vertex_in_stationary_mode():
    problem = box_problem([[1.0]], [0.0])
    sol = solve_qp(problem, mode="stationary-point", start=np.array([0.6]))
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.status == "optimal"
    assert sol.kkt_residual <= 1e-8
    # vertex enumeration: f(0) = 0 < f(1) = 0.5, and 0.6 ascends toward 1
    assert objective(problem, sol.primal) == pytest.approx(0.5, abs=1e-8)


def test_matches_reference_solver():
    for problem, ref in zip(seeded_problems(), REFERENCE_OBJECTIVES):
        sol = solve_qp(problem)
        assert_kkt(problem, sol)
        assert objective(problem, sol.primal) == pytest.approx(ref, abs=1e-7)


def test_diagonal_box_only_matches_clipping():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(2, 13))
        q = -rng.uniform(0.1, 3.0, n)
        g = rng.normal(size=n)
        problem = box_problem(np.diag(q), g)
        sol = solve_qp(problem)
        expected = np.clip(-g / q, 0.0, 1.0)
        np.testing.assert_allclose(sol.primal, expected, atol=1e-9)


def test_linear_coordinate_goes_to_endpoint():
    # zero curvature in one coordinate: sign of g decides the endpoint
    problem = box_problem(np.diag([-1.0, 0.0]), [0.2, 0.7])
    sol = solve_qp(problem)
    np.testing.assert_allclose(sol.primal, [0.2, 1.0], atol=1e-8)
    problem = box_problem(np.diag([-1.0, 0.0]), [0.2, -0.7])
    sol = solve_qp(problem)
    np.testing.assert_allclose(sol.primal, [0.2, 0.0], atol=1e-8)


def test_general_rows_respected():
    # maximize -0.5||d||^2 + [1,1]'d subject to d_0 + d_1 <= 0.5
    problem = QpProblem(
        Q=-np.eye(2), g_lin=np.array([1.0, 1.0]),
        A=np.array([[-1.0, -1.0]]), b=np.array([0.5]),
        lower=np.zeros(2), upper=np.ones(2),
    )
    sol = solve_qp(problem)
    np.testing.assert_allclose(sol.primal, [0.25, 0.25], atol=1e-8)
    assert sol.dual_ineq[0] == pytest.approx(0.75, abs=1e-7)
    assert_kkt(problem, sol)


def test_infeasible_rows_detected():
    problem = QpProblem(
        Q=-np.eye(1), g_lin=np.zeros(1),
        A=np.array([[1.0], [-1.0]]), b=np.array([-0.8, 0.2]),  # y >= 0.8 and y <= 0.2
        lower=np.zeros(1), upper=np.ones(1),
    )
    sol = solve_qp(problem)
    assert sol.status == "infeasible"


def test_start_outside_rows_recovers():
    # start violates the row; solver must recover feasibility and optimality
    problem = QpProblem(
        Q=-np.eye(2), g_lin=np.array([2.0, 2.0]),
        A=np.array([[-1.0, 0.0]]), b=np.array([0.3]),  # d_0 <= 0.3
        lower=np.zeros(2), upper=np.ones(2),
    )
    sol = solve_qp(problem, start=np.array([1.0, 1.0]))
    np.testing.assert_allclose(sol.primal, [0.3, 1.0], atol=1e-7)
    assert_kkt(problem, sol)


def test_runs_are_reproducible():
    problem = seeded_problems()[1]
    a = solve_qp(problem)
    b = solve_qp(problem)
    np.testing.assert_allclose(a.primal, b.primal, atol=1e-9)
    assert a.kkt_residual == b.kkt_residual


def test_stationary_mode_on_concave_problem_agrees():
    problem = seeded_problems()[0]
    conc = solve_qp(problem)
    stat = solve_qp(problem, mode="stationary-point", start=np.full(4, 0.5))
    np.testing.assert_allclose(stat.primal, conc.primal, atol=1e-6)
    assert stat.kkt_residual <= 1e-8


def test_stationary_mode_indefinite():
    problem = box_problem(np.diag([1.0, -1.0]), [0.05, 0.4])
    sol = solve_qp(problem, mode="stationary-point", start=np.array([0.3, 0.9]))
    assert sol.status == "optimal"
    assert sol.kkt_residual <= 1e-8
    # concave coordinate settles at its stationary value
    assert sol.primal[1] == pytest.approx(0.4, abs=1e-7)
    # convex coordinate escapes to the upper vertex
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-7)


def test_dual_signs_in_stationary_mode():
    problem = box_problem([[1.0]], [1.0])
    sol = solve_qp(problem, mode="stationary-point", start=np.array([0.5]))
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-8)
    # Q d + g + mu - gamma = 0 -> gamma = 2
    assert sol.dual_upper[0] == pytest.approx(2.0, abs=1e-6)


def test_problem_validation():
    with pytest.raises(ValueError):
        QpProblem(Q=np.eye(2), g_lin=np.zeros(3), A=np.zeros((0, 3)), b=np.zeros(0),
                  lower=np.zeros(3), upper=np.ones(3))
    with pytest.raises(ValueError):
        QpProblem(Q=np.eye(1), g_lin=np.zeros(1), A=np.zeros((0, 1)), b=np.zeros(0),
                  lower=np.ones(1), upper=np.zeros(1))
    with pytest.raises(ValueError):
        solve_qp(box_problem([[-1.0]], [0.0]), mode="simplex")
