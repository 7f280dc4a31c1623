import numpy as np
import pytest

from autoscvx.discretize import discretize
from autoscvx.ocp import initial_guess
from autoscvx.qp import QpSolution, QpStatus, solve_qp
from autoscvx.subproblem import (
    DeviationSolution, PenaltyState, SubproblemError, VariableLayout, build_subproblem, extract_solution,
    qp_objective,
)


@pytest.fixture(scope="module")
def setup_a(spec_a):
    guess = initial_guess(spec_a)
    disc = discretize(spec_a.model, guess)
    pen = PenaltyState.initial(spec_a.n_eq, spec_a.n_ineq)
    return guess, disc, pen


@pytest.fixture(scope="module")
def first_step(spec_a, setup_a):
    guess, disc, pen = setup_a
    sub = build_subproblem(guess, disc, spec_a, pen)
    sol = solve_qp(sub.qp)
    assert sol.status is QpStatus.SOLVED
    return sub, sol, extract_solution(sol, sub)


def test_layout_sizes(spec_a, setup_a):
    guess, disc, pen = setup_a
    sub = build_subproblem(guess, disc, spec_a, pen)
    lay = sub.layout
    assert lay.n == 319 + 5 + 200
    assert (lay.x.stop - lay.x.start, lay.u.stop - lay.u.start, lay.T.stop - lay.T.start) == (240, 40, 39)
    assert lay.eq_buffer.stop - lay.eq_buffer.start == 5
    assert lay.ineq_buffer.stop == lay.n
    assert lay.iu(0, 0) == 240 and lay.iT(0) == 280
    with_abs = build_subproblem(guess, disc, spec_a, pen, abs_linear=True).layout
    assert with_abs.n == lay.n + 5


def test_proximal_diagonal(spec_a, setup_a):
    guess, disc, pen = setup_a
    sub = build_subproblem(guess, disc, spec_a, pen, s_x=0.5, s_u=10.0)
    half_diag = 0.5 * sub.qp.P.diagonal()
    lay = sub.layout
    assert np.allclose(half_diag[lay.x], 1.0)
    assert np.allclose(half_diag[lay.u], 0.05)
    assert np.all(half_diag[lay.T] == 0.0)
    assert np.allclose(sub.qp.P.diagonal()[lay.eq_buffer], pen.w_h)
    assert sub.qp.q[lay.ix(spec_a.N - 1, 3)] == 1.0


def test_zero_deviation_is_feasible(spec_a, setup_a):
    guess, disc, pen = setup_a
    sub = build_subproblem(guess, disc, spec_a, pen)
    lay = sub.layout
    rows = spec_a.buffered_rows(guess.x, guess.u)
    z = np.zeros(lay.n)
    z[lay.eq_buffer] = rows.eq
    z[lay.ineq_buffer] = np.maximum(rows.ineq, 0.0)
    Az = sub.qp.A @ z
    assert np.all(Az >= sub.qp.l - 1e-10)
    assert np.all(Az <= sub.qp.u + 1e-10)


def test_pack_extract_round_trip(first_step):
    sub, sol, dev = first_step
    assert np.array_equal(sub.layout.pack(dev), sol.x)
    assert qp_objective(sub, dev) == pytest.approx(sol.objective, rel=1e-8, abs=1e-10)


def test_extract_zero_solution(spec_a, first_step):
    sub, sol, _ = first_step
    zero = QpSolution(np.zeros(sub.layout.n), np.zeros(sol.y.size), QpStatus.SOLVED, 0, 0.0, 0.0)
    dev = extract_solution(zero, sub)
    for arr in (dev.dx, dev.du, dev.dT, dev.eq_buffer, dev.ineq_buffer, dev.lam_hat, dev.mu_hat):
        assert not np.any(arr)
    assert dev.abs_bound is None


def test_extract_rejects_negative_buffers(first_step):
    sub, sol, _ = first_step
    x = sol.x.copy()
    x[sub.layout.ineq_buffer.start] = -1e-3
    bad = QpSolution(x, sol.y, QpStatus.SOLVED, 1, 0.0, 0.0)
    with pytest.raises(SubproblemError, match="negative"):
        extract_solution(bad, sub)
    infeasible = QpSolution(sol.x, sol.y, QpStatus.PRIMAL_INFEASIBLE, 1, 0.0, 0.0)
    with pytest.raises(SubproblemError):
        extract_solution(infeasible, sub)


def test_first_step_buffers_match_linearized_rows(spec_a, setup_a, first_step):
    guess, _, _ = setup_a
    sub, _, dev = first_step
    rows = sub.rows
    lin_h = rows.eq + np.einsum("ij,ij->i", rows.eq_dx, dev.dx[rows.eq_node])
    assert dev.eq_buffer == pytest.approx(lin_h, abs=1e-7)
    # the guess misses the terminal target, so the buffers carry it
    assert np.max(np.abs(dev.eq_buffer) / spec_a.partition.tol_h) > 1
    lin_g = (rows.ineq + np.einsum("ij,ij->i", rows.ineq_dx, dev.dx[rows.ineq_node])
             + np.einsum("ij,ij->i", rows.ineq_du, dev.du[rows.ineq_node]))
    assert np.all(dev.ineq_buffer >= lin_g - 1e-7)
    assert np.all(dev.ineq_buffer >= -1e-9)


def test_dynamics_rows_hold_exactly(spec_a, setup_a, first_step):
    guess, disc, _ = setup_a
    _, _, dev = first_step
    lhs = dev.dx[1:] + guess.x[1:] - disc.x_prop
    rhs = (np.einsum("kij,kj->ki", disc.A, dev.dx[:-1]) + np.einsum("kij,kj->ki", disc.B_minus, dev.du[:-1])
           + np.einsum("kij,kj->ki", disc.B_plus, dev.du[1:]) + disc.S * dev.dT[:, None])
    assert np.max(np.abs(lhs - rhs)) < 1e-7


def test_step_respects_hard_limits(spec_a, setup_a, first_step):
    guess, _, _ = setup_a
    _, _, dev = first_step
    new = dev.apply(guess)
    assert np.all(np.abs(dev.dT) <= 0.1 * guess.T + 1e-9)
    assert np.all(np.abs(new.u) <= spec_a.u_hi + 1e-9)
    assert np.sum(new.T) <= spec_a.tf_bounds[1] + 1e-9
    assert np.allclose(dev.dx[0], 0.0, atol=1e-9)


def test_dimension_checks(spec_a, spec_b, setup_a):
    guess, disc, pen = setup_a
    with pytest.raises(SubproblemError):
        build_subproblem(guess, disc, spec_b, PenaltyState.initial(spec_b.n_eq, spec_b.n_ineq))
    with pytest.raises(SubproblemError):
        build_subproblem(guess, disc, spec_a, PenaltyState.initial(3, 3))
    bad = discretize(spec_a.model, guess)
    bad.A[0, 0, 0] = np.nan
    with pytest.raises(SubproblemError, match="non-finite"):
        build_subproblem(guess, bad, spec_a, pen)


def test_penalty_state_validation():
    with pytest.raises(ValueError):
        PenaltyState(np.ones(2), np.ones(1), np.zeros(3), np.zeros(1))
    with pytest.raises(ValueError):
        PenaltyState(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1))
    with pytest.raises(ValueError):
        PenaltyState(np.ones(1), np.ones(1), np.zeros(1), -np.ones(1))


def test_pack_rejects_wrong_shape():
    lay = VariableLayout(3, 6, 1, 1, 1)
    dev = DeviationSolution(np.zeros((3, 6)), np.zeros((3, 1)), np.zeros(2), np.zeros(1), np.zeros(2),
                            np.zeros(1), np.zeros(2))
    with pytest.raises(ValueError):
        lay.pack(dev)
