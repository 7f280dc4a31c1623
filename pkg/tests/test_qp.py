import numpy as np
import pytest
import scipy.sparse as sp

from autoscvx.qp import QpProblem, QpSettings, QpStatus, dump_triplets, kkt_residuals, load_triplets, solve_qp

INF = np.inf


def planted_qp(rng, n=None, m=None):
    """Random strictly convex QP with a known primal-dual solution and active set.

    Each row is an equality, active at its lower or upper bound, or inactive
    (strict slack, zero multiplier); some inactive rows are one-sided.
    """
    n = n or int(rng.integers(2, 31))
    m = m if m is not None else int(rng.integers(1, 2 * n))
    M = rng.normal(size=(n, n))
    P = M @ M.T + rng.uniform(0.05, 1.0) * np.eye(n)
    x = rng.normal(size=n)
    kinds = rng.choice(["eq", "lo", "hi", "free"], size=m)
    active = np.flatnonzero(kinds != "free")
    if len(active) > n:
        kinds[active[n:]] = "free"
        active = active[:n]
    while True:  # active rows must be linearly independent
        A = rng.normal(size=(m, n)) * (rng.random((m, n)) < 0.6)
        if len(active) == 0 or np.linalg.matrix_rank(A[active]) == len(active):
            break
    ax = A @ x
    y = np.zeros(m)
    l, u = np.empty(m), np.empty(m)
    for i, k in enumerate(kinds):
        if k == "eq":
            l[i] = u[i] = ax[i]
            y[i] = rng.normal()
        elif k == "lo":
            l[i], u[i] = ax[i], ax[i] + rng.uniform(0.5, 3) if rng.random() < 0.5 else INF
            y[i] = -rng.uniform(0.1, 2)
        elif k == "hi":
            l[i], u[i] = ax[i] - rng.uniform(0.5, 3) if rng.random() < 0.5 else -INF, ax[i]
            y[i] = rng.uniform(0.1, 2)
        else:
            l[i] = ax[i] - rng.uniform(0.3, 3) if rng.random() < 0.7 else -INF
            u[i] = ax[i] + rng.uniform(0.3, 3) if rng.random() < 0.7 else INF
    q = -P @ x - A.T @ y
    return QpProblem(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u), x, y, kinds


def kkt_direct(prob, kinds):
    """Dense solve of the equality-constrained KKT system on the active rows."""
    P, A = prob.P.toarray(), prob.A.toarray()
    act = np.flatnonzero(kinds != "free")
    b = np.where(kinds[act] == "hi", prob.u[act], prob.l[act])
    n, k = P.shape[0], len(act)
    K = np.block([[P, A[act].T], [A[act], np.zeros((k, k))]])
    sol = np.linalg.solve(K, np.concatenate([-prob.q, b]))
    y = np.zeros(prob.m)
    y[act] = sol[n:]
    return sol[:n], y


def test_planted_random_qps():
    rng = np.random.default_rng(20240601)
    for _ in range(200):
        prob, x_star, y_star, kinds = planted_qp(rng)
        sol = solve_qp(prob)
        assert sol.status is QpStatus.SOLVED
        x_kkt, y_kkt = kkt_direct(prob, kinds)
        np.testing.assert_allclose(x_kkt, x_star, atol=1e-8 * (1 + np.abs(x_star).max()))
        scale = 1 + np.abs(x_kkt).max()
        assert np.max(np.abs(sol.x - x_kkt)) <= 1e-6 * scale
        assert np.max(np.abs(sol.y - y_kkt)) <= 1e-6 * (1 + np.abs(y_kkt).max())
        prim, dual, compl = kkt_residuals(prob, sol.x, sol.y)
        assert max(prim, dual, compl) <= 1e-7


def test_equality_only_qp_is_a_linear_solve():
    rng = np.random.default_rng(1)
    prob, x_star, y_star, _ = planted_qp(rng, n=10, m=0)
    sol = solve_qp(prob)
    np.testing.assert_allclose(sol.x, np.linalg.solve(prob.P.toarray(), -prob.q), atol=1e-8)


def test_primal_infeasible():
    P = sp.eye(2, format="csc")
    A = sp.csc_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    prob = QpProblem(P, np.zeros(2), A, np.array([1.0, -INF]), np.array([INF, -1.0]))
    sol = solve_qp(prob)
    assert sol.status is QpStatus.PRIMAL_INFEASIBLE
    cert = sol.certificate
    # Farkas: A'y = 0 and the support function is negative
    assert np.linalg.norm(A.T @ cert, np.inf) <= 1e-6 * np.linalg.norm(cert, np.inf)
    support = np.sum(np.where(cert > 0, prob.u * cert, 0.0) + np.where(cert < 0, prob.l * cert, 0.0))
    assert support < 0


def test_dual_infeasible():
    P = sp.csc_matrix((2, 2))
    A = sp.csc_matrix(np.array([[1.0, 0.0]]))
    prob = QpProblem(P, np.array([0.0, -1.0]), A, np.array([0.0]), np.array([1.0]))
    assert solve_qp(prob).status is QpStatus.DUAL_INFEASIBLE


def test_max_iter_status():
    rng = np.random.default_rng(3)
    prob, *_ = planted_qp(rng, n=20, m=30)
    sol = solve_qp(prob, QpSettings(max_iter=5, polish=False))
    assert sol.status is QpStatus.MAX_ITER
    assert sol.iterations == 5


def test_warm_start_helps():
    rng = np.random.default_rng(4)
    prob, x_star, y_star, _ = planted_qp(rng, n=25, m=40)
    cold = solve_qp(prob, QpSettings(polish=False))
    warm = solve_qp(prob, QpSettings(polish=False), x0=cold.x, y0=cold.y)
    assert warm.status is QpStatus.SOLVED
    assert warm.iterations < cold.iterations


def test_problem_validation():
    P = sp.eye(2, format="csc")
    A = sp.eye(2, format="csc")
    with pytest.raises(ValueError):
        QpProblem(sp.csc_matrix(np.array([[1.0, 1.0], [0.0, 1.0]])), np.zeros(2), A, np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        QpProblem(P, np.zeros(2), A, np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        QpProblem(P, np.zeros(3), A, np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        QpProblem(P, np.array([np.nan, 0.0]), A, np.zeros(2), np.ones(2))


def test_triplet_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    prob, *_ = planted_qp(rng, n=8, m=6)
    path = tmp_path / "qp.txt"
    dump_triplets(prob, path)
    back = load_triplets(path)
    assert abs(back.P - prob.P).max() == 0
    assert abs(back.A - prob.A).max() == 0
    np.testing.assert_array_equal(back.q, prob.q)
    np.testing.assert_array_equal(back.l, prob.l)
    np.testing.assert_array_equal(back.u, prob.u)


def test_objective_scaling_invariance():
    rng = np.random.default_rng(6)
    prob, x_star, *_ = planted_qp(rng, n=12, m=10)
    sol = solve_qp(prob.scaled(1e3))
    np.testing.assert_allclose(sol.x, x_star, atol=1e-6 * (1 + np.abs(x_star).max()))
