import numpy as np
import pytest

from heatnet.sqp import NlpProblem, SqpOptions, solve_ip_qp, solve_sqp


def test_equality_qp_exact():
    p = NlpProblem(2, 1, np.full(2, -np.inf), np.full(2, np.inf),
                   lambda x: (0.5 * float(x @ x), x.copy()),
                   lambda x: (np.array([x[0] + x[1] - 2.0]), np.array([[1.0, 1.0]])))
    r = solve_sqp(p, np.array([5.0, -3.0]))
    assert r.success
    assert np.allclose(r.x, [1.0, 1.0], atol=1e-8)


def test_active_bound():
    p = NlpProblem(1, 0, np.array([-np.inf]), np.array([1.0]),
                   lambda x: (float((x[0] - 2.0) ** 2), np.array([2.0 * (x[0] - 2.0)])),
                   lambda x: (np.zeros(0), np.zeros((0, 1))))
    r = solve_sqp(p, np.array([0.0]))
    assert r.success and r.x[0] == pytest.approx(1.0, abs=1e-9)


def test_nonconvex_bilinear():
    p = NlpProblem(2, 1, np.full(2, -np.inf), np.full(2, np.inf),
                   lambda x: (float(x @ x), 2.0 * x),
                   lambda x: (np.array([x[0] * x[1] - 1.0]), np.array([[x[1], x[0]]])))
    r = solve_sqp(p, np.array([2.0, 0.3]))
    assert r.success
    assert r.f == pytest.approx(2.0, abs=1e-7)


def test_fixed_variable_elimination():
    p = NlpProblem(2, 1, np.array([-np.inf, 3.0]), np.array([np.inf, 3.0]),
                   lambda x: (float((x[0] - 1.0) ** 2 + x[1]), np.array([2.0 * (x[0] - 1.0), 1.0])),
                   lambda x: (np.array([x[0] + x[1] - 5.0]), np.array([[1.0, 1.0]])))
    r = solve_sqp(p, np.array([0.0, 3.0]))
    assert r.success and np.allclose(r.x, [2.0, 3.0], atol=1e-8)


def test_infeasible_detected():
    p = NlpProblem(1, 1, np.array([-np.inf]), np.array([np.inf]),
                   lambda x: (float(x[0] ** 2), np.array([2.0 * x[0]])),
                   lambda x: (np.array([x[0] ** 2 + 1.0]), np.array([[2.0 * x[0]]])))
    r = solve_sqp(p, np.array([1.0]), SqpOptions(max_iter=60))
    assert r.status == "infeasible"


def test_random_equality_qp_matches_kkt():
    rng = np.random.default_rng(0)
    n, m = 40, 25
    A = rng.normal(size=(n, n))
    Q = A @ A.T + n * np.eye(n)
    q = rng.normal(size=n)
    C = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    p = NlpProblem(n, m, np.full(n, -np.inf), np.full(n, np.inf),
                   lambda x: (0.5 * float(x @ Q @ x) + float(q @ x), Q @ x + q),
                   lambda x: (C @ x - b, C))
    r = solve_sqp(p, np.zeros(n))
    K = np.block([[Q, C.T], [C, np.zeros((m, m))]])
    sol = np.linalg.solve(K, np.concatenate([-q, b]))
    assert r.success
    assert np.abs(r.x - sol[:n]).max() < 1e-6


def test_box_qp_matches_reference():
    from scipy.optimize import minimize

    rng = np.random.default_rng(1)
    n, m = 30, 18
    A = rng.normal(size=(n, n))
    Q = A @ A.T + n * np.eye(n)
    q = rng.normal(size=n)
    C = rng.normal(size=(m, n)) * 0.05
    b = C @ rng.uniform(-0.2, 0.2, size=n)  # an interior point satisfies C x = b
    lo, hi = -0.4 * np.ones(n), 0.4 * np.ones(n)
    p = NlpProblem(n, m, lo, hi,
                   lambda x: (0.5 * float(x @ Q @ x) + float(q @ x), Q @ x + q),
                   lambda x: (C @ x - b, C))
    r = solve_sqp(p, np.zeros(n))
    ref = minimize(lambda x: 0.5 * x @ Q @ x + q @ x, np.zeros(n),
                   jac=lambda x: Q @ x + q, method="SLSQP",
                   bounds=list(zip(lo, hi)),
                   constraints=[{"type": "eq", "fun": lambda x: C @ x - b,
                                 "jac": lambda x: C}],
                   options={"maxiter": 500, "ftol": 1e-12})
    assert r.success
    assert r.f <= ref.fun + 1e-6 * (1.0 + abs(ref.fun))


def test_warm_start_noop():
    rng = np.random.default_rng(2)
    n, m = 20, 10
    A = rng.normal(size=(n, n))
    Q = A @ A.T + n * np.eye(n)
    q = rng.normal(size=n)
    C = rng.normal(size=(m, n))
    b = C @ rng.uniform(-0.4, 0.4, size=n)
    p = NlpProblem(n, m, np.full(n, -1.0), np.full(n, 1.0),
                   lambda x: (0.5 * float(x @ Q @ x) + float(q @ x), Q @ x + q),
                   lambda x: (C @ x - b, C))
    r = solve_sqp(p, np.zeros(n))
    assert r.success
    r2 = solve_sqp(p, r.x, y0=r.y, hessian0=r.hessian, penalty0=r.penalty)
    assert r2.success
    assert r2.iterations <= 2
    assert abs(r2.f - r.f) <= 1e-8 * (1.0 + abs(r.f))


def test_merit_rejects_constraint_blowup():
    # a step that improves f but explodes c must not be taken whole
    def eval_f(x):
        return float(-x[0]), np.array([-1.0, 0.0])

    def eval_c(x):
        return np.array([x[0] ** 2 - x[1]]), np.array([[2.0 * x[0], -1.0]])

    p = NlpProblem(2, 1, np.array([-10.0, -10.0]), np.array([10.0, 10.0]),
                   eval_f, eval_c)
    r = solve_sqp(p, np.array([0.0, 0.0]), SqpOptions(max_iter=60))
    # optimum sits at the bound x0=10 with x1 = 100... the run stays bounded
    assert np.isfinite(r.f) and r.c_norm < 1e-6


def test_ip_qp_elastic_when_inconsistent():
    # contradictory equalities: the elastic mode must still return a point
    B = np.eye(2)
    g = np.zeros(2)
    J = np.array([[1.0, 0.0], [1.0, 0.0]])
    c = np.array([1.0, -1.0])  # x0 = -1 and x0 = +1 simultaneously
    qp = solve_ip_qp(B, g, J, c, np.full(2, -5.0), np.full(2, 5.0), rho=100.0)
    assert qp.slack_l1 > 0.5
    assert np.isfinite(qp.d).all()
