import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from autoscvx.discretize import discretize
from autoscvx.engine import (
    PTR, AutoSCvx, SolverSettings, SolveStatus, autoscvx_solve, check_convergence, ptr_penalty, ptr_solve,
    row_group, update_duals, update_penalty_weights,
)
from autoscvx.qp import solve_qp
from autoscvx.subproblem import PenaltyState, build_subproblem, extract_solution

finite = st.floats(-1e3, 1e3, allow_nan=False)
positive = st.floats(1e-6, 1e3, allow_nan=False)


def _pen(w_h, w_g, lam, mu):
    return PenaltyState(np.asarray(w_h), np.asarray(w_g), np.asarray(lam), np.asarray(mu))


@settings(max_examples=200, deadline=None)
@given(
    w=arrays(float, 4, elements=positive), eq_buf=arrays(float, 4, elements=finite),
    ineq_buf=arrays(float, 4, elements=st.floats(0, 1e3)), eps=arrays(float, 4, elements=positive),
    floor=st.floats(1e-6, 1.0),
)
def test_weight_floor_and_formula(w, eq_buf, ineq_buf, eps, floor):
    pen = _pen(w, w, np.zeros(4), np.zeros(4))
    out = update_penalty_weights(pen, eq_buf, ineq_buf, eps, eps, floor)
    assert np.all(out.w_h >= floor) and np.all(out.w_g >= floor)
    assert out.w_h == pytest.approx(np.maximum(floor, w * np.abs(eq_buf) / eps))
    assert out.w_g == pytest.approx(np.maximum(floor, w * ineq_buf / eps))
    assert np.array_equal(out.lam, pen.lam) and np.array_equal(out.mu, pen.mu)


@settings(max_examples=100, deadline=None)
@given(w=arrays(float, 3, elements=st.floats(1e-2, 1e3)), eps=arrays(float, 3, elements=positive),
       sign=arrays(float, 3, elements=st.sampled_from([-1.0, 1.0])))
def test_weight_fixed_point_at_target(w, eps, sign):
    pen = _pen(w, w, np.zeros(3), np.zeros(3))
    out = update_penalty_weights(pen, sign * eps, eps, eps, eps, 1e-3)
    assert out.w_h == pytest.approx(w, rel=1e-12)
    assert out.w_g == pytest.approx(w, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    hist=st.lists(st.tuples(arrays(float, 3, elements=finite), arrays(float, 3, elements=st.floats(0, 1e3))),
                  min_size=1, max_size=15),
    s_lam=st.floats(1e-3, 10.0), s_mu=st.floats(1e-3, 10.0),
)
def test_dual_replay_and_sign(hist, s_lam, s_mu):
    pen = PenaltyState.initial(3, 3)
    for eq_buf, ineq_buf in hist:
        pen = update_duals(pen, eq_buf, ineq_buf, s_lam, s_mu)
        assert np.all(pen.mu >= 0)
    eq_sum, ineq_sum = (np.sum(col, axis=0) for col in zip(*hist))
    assert pen.lam == pytest.approx(s_lam * eq_sum, rel=1e-9, abs=1e-9)
    assert pen.mu == pytest.approx(s_mu * ineq_sum, rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(mu=arrays(float, 5, elements=st.floats(0, 10)), ineq_buf=arrays(float, 5, elements=finite))
def test_mu_projection_never_goes_negative(mu, ineq_buf):
    pen = _pen(np.ones(5), np.ones(5), np.zeros(5), mu)
    out = update_duals(pen, np.zeros(5), ineq_buf, 0.1, 1.0)
    assert np.all(out.mu >= 0)
    assert out.mu == pytest.approx(np.maximum(mu + ineq_buf, 0.0), abs=1e-12)


def test_history_obeys_update_rules(spec_a, solved_a):
    st_ = SolverSettings.from_dict(spec_a.config.solver)
    recs = solved_a.iterations
    lam = np.zeros(spec_a.n_eq)
    for rec in recs:
        assert np.all(rec.w_h >= st_.eps_w_min) and np.all(rec.w_g >= st_.eps_w_min)
        assert np.all(rec.mu >= 0)
        assert rec.lam == pytest.approx(lam, abs=1e-14)
        lam = lam + st_.s_lambda * rec.eq_buffer
    assert np.all(recs[0].w_h == 1.0) and np.all(recs[0].lam == 0.0)


def test_nominal_solve(spec_a, solved_a):
    assert solved_a.status is SolveStatus.CONVERGED
    assert solved_a.n_iterations <= 20
    last = solved_a.iterations[-1]
    assert last.converged_branch in ("step", "cost")
    assert solved_a.validation.terminal_ok
    assert last.max_normalized_violation <= 1.0
    tf = solved_a.trajectory.T.sum() * spec_a.model.scales.time_scale
    assert 1600 < tf < 1800
    # path rows are ratios minus one, so the converged profile stays near or below zero
    assert np.all(solved_a.validation.max_intersample_path[:3] < 0.05)


def test_converged_point_is_nearly_stationary(spec_a, solved_a):
    st_ = SolverSettings.from_dict(spec_a.config.solver)
    last = solved_a.iterations[-1]
    pen = PenaltyState(last.w_h, last.w_g, last.lam, last.mu)
    pen = update_penalty_weights(pen, last.eq_buffer, last.ineq_buffer, st_.target_fraction * spec_a.partition.eps_h,
                                 st_.target_fraction * spec_a.partition.eps_g, st_.eps_w_min)
    pen = update_duals(pen, last.eq_buffer, last.ineq_buffer, st_.s_lambda, st_.s_mu)
    ref = solved_a.trajectory
    sub = build_subproblem(ref, discretize(spec_a.model, ref), spec_a, pen, st_.s_x, st_.s_u)
    dev = extract_solution(solve_qp(sub.qp), sub)
    assert np.all(np.abs(dev.dx) <= spec_a.opt_tol_x)


def test_convergence_branches(spec_a, solved_a):
    rec = solved_a.iterations[-1]
    part = spec_a.partition
    small = dict(dx=np.zeros_like(rec.dx), eq_buffer=np.zeros_like(rec.eq_buffer),
                 ineq_buffer=np.zeros_like(rec.ineq_buffer), eq_residual=np.zeros_like(rec.eq_residual),
                 ineq_residual=-np.ones_like(rec.ineq_residual), delta_cost=0.0)
    assert check_convergence(dataclasses.replace(rec, **small), spec_a).branch == "step"
    big_step = dataclasses.replace(rec, **(small | {"dx": np.ones_like(rec.dx)}))
    assert check_convergence(big_step, spec_a).branch == "cost"
    infeasible = dataclasses.replace(big_step, eq_residual=2 * part.tol_h)
    assert check_convergence(infeasible, spec_a).branch is None
    slow = dataclasses.replace(big_step, delta_cost=10.0)
    assert not check_convergence(slow, spec_a).converged
    big_buffer = dataclasses.replace(rec, **(small | {"eq_buffer": 2 * part.tol_h, "delta_cost": 10.0}))
    chk = check_convergence(big_buffer, spec_a)
    assert chk.step_ok and not chk.linear_ok and not chk.converged


def test_ptr_weights(spec_a):
    pen = ptr_penalty(spec_a, 1000.0, 0.0)
    assert np.allclose(pen.w_h, 25.0) and np.allclose(pen.w_g, 25.0)
    pen = ptr_penalty(spec_a, {"terminal": 400.0, "heat_rate": 80.0, "default": 40.0}, 0.5)
    assert np.allclose(pen.w_h, 10.0)
    labels = spec_a.partition.labels_g
    heat = np.array([lb.startswith("heat_rate") for lb in labels])
    assert np.allclose(pen.w_g[heat], 2.0) and np.allclose(pen.w_g[~heat], 1.0)
    assert np.all(pen.lam == 0.5)
    assert row_group("nfz2@7") == "nfz"
    with pytest.raises(KeyError):
        row_group("mystery")


def test_ptr_frozen_weights_and_shared_loop(spec_a):
    short = SolverSettings(max_iterations=2, validate=False)
    rep = ptr_solve(spec_a, fixed_weights=10.0, settings=short)
    assert rep.method == "ptr" and rep.n_iterations == 2
    for rec in rep.iterations:
        assert np.allclose(rec.w_h, 10.0 / 40) and np.all(rec.lam == 0)
    auto = autoscvx_solve(spec_a, settings=SolverSettings(max_iterations=2, validate=False, method="ptr"))
    assert auto.method == "auto"
    # identical first subproblem apart from the weights: both start at the same reference
    assert rep.iterations[0].dx.shape == auto.iterations[0].dx.shape
    assert rep.status is SolveStatus.MAX_ITERATIONS and rep.validation is None


def test_solve_is_deterministic(spec_a):
    short = SolverSettings(max_iterations=3, validate=False)
    a = autoscvx_solve(spec_a, settings=short)
    b = autoscvx_solve(spec_a, settings=short)
    for ra, rb in zip(a.iterations, b.iterations):
        assert np.array_equal(ra.x, rb.x) and np.array_equal(ra.w_g, rb.w_g)


def test_callback_sees_every_iteration(spec_a):
    seen = []
    rep = autoscvx_solve(spec_a, settings=SolverSettings(max_iterations=2, validate=False), callback=seen.append)
    assert [r.iteration for r in seen] == [1, 2]
    assert seen == rep.iterations


def test_estimator_api(spec_a):
    est = AutoSCvx(max_iterations=2, validate=False)
    assert est.get_params()["target_fraction"] == 0.2
    twin = clone(est).set_params(s_x=0.25)
    assert twin.s_x == 0.25 and est.s_x == 0.5
    est.fit(spec_a)
    assert est.n_iter_ == 2 and not est.converged_
    assert est.trajectory_.N == 40 and np.isfinite(est.cost_)
    ptr = PTR(ptr_weight=1000.0, max_iterations=1, validate=False).fit(spec_a)
    assert ptr.report_.method == "ptr"


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(s_x=0.0)
    with pytest.raises(ValueError):
        SolverSettings(method="newton")
    with pytest.raises(ValueError):
        SolverSettings.from_dict({"trust": 1.0})
    st_ = SolverSettings.from_dict({"s_x": 0.3}, max_iterations=5, s_u=None)
    assert (st_.s_x, st_.max_iterations, st_.s_u) == (0.3, 5, 10.0)
