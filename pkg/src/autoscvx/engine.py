"""Primal-dual successive convexification with self-tuning penalty weights.

:class:`AutoSCvx` adapts the quadratic buffer weights and the linear dual
terms every iteration; :class:`PTR` runs the identical loop with the weights
frozen. Both follow the scikit-learn estimator protocol: hyperparameters go
to ``__init__``, ``fit(problem)`` runs the solve and stores results in
attributes with a trailing underscore.
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator

from .discretize import PropagationError, ReferenceTrajectory, discretize, single_shoot
from .ocp import ProblemSpec, evaluate_nonconvex_residuals, initial_guess
from .qp import QpSettings, QpStatus, solve_qp
from .subproblem import PenaltyState, SubproblemError, build_subproblem, extract_solution
from .vehicle import SingularStateError

log = logging.getLogger(__name__)


class SolveStatus(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    SUBPROBLEM_FAILURE = "subproblem_failure"


@dataclass
class SolverSettings:
    s_x: float = 0.5
    s_u: float = 10.0
    s_lambda: float = 0.1
    s_mu: float = 1.0
    eps_w_min: float = 1e-3
    max_iterations: int = 20
    method: str = "auto"  # "auto" or "ptr"
    # PTR: scalar weight or {row group: weight}; divided by the node count
    ptr_weight: float | dict = 1000.0
    ptr_linear: float = 0.0
    ptr_linear_mode: str = "signed"  # "abs" penalizes |p|, "signed" uses p as is
    # Target residual for the weight update as a fraction of the feasibility tolerance
    target_fraction: float = 0.2
    dT_fraction: float = 0.1
    substeps: int = 30
    qp_eps_abs: float = 1e-8
    qp_eps_rel: float = 1e-7
    qp_max_iter: int = 50_000
    validate: bool = True

    def __post_init__(self):
        for name in ("s_x", "s_u", "s_lambda", "s_mu", "eps_w_min", "target_fraction", "dT_fraction"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.method not in ("auto", "ptr"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.ptr_linear_mode not in ("abs", "signed"):
            raise ValueError("ptr_linear_mode must be 'abs' or 'signed'")

    @classmethod
    def from_dict(cls, raw: dict | None, **overrides) -> "SolverSettings":
        names = {f.name for f in fields(cls)}
        raw = dict(raw or {})
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown solver setting(s) {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    def qp_settings(self) -> QpSettings:
        return QpSettings(eps_abs=self.qp_eps_abs, eps_rel=self.qp_eps_rel, max_iter=self.qp_max_iter)


# ------------------------------------------------------------- update rules
def update_penalty_weights(pen: PenaltyState, eq_buf, ineq_buf, eps_h, eps_g, eps_w_min) -> PenaltyState:
    """Multiplicative weight update ``w <- max(w_min, w * |buffer| / eps)``."""
    eq_buf = np.asarray(eq_buf, dtype=float)
    ineq_buf = np.maximum(np.asarray(ineq_buf, dtype=float), 0.0)
    w_h = np.maximum(eps_w_min, pen.w_h * np.abs(eq_buf) / eps_h)
    w_g = np.maximum(eps_w_min, pen.w_g * ineq_buf / eps_g)
    return PenaltyState(w_h, w_g, pen.lam.copy(), pen.mu.copy())


def update_duals(pen: PenaltyState, eq_buf, ineq_buf, s_lambda, s_mu) -> PenaltyState:
    ineq_buf = np.asarray(ineq_buf, dtype=float)
    lam = pen.lam + s_lambda * np.asarray(eq_buf, dtype=float)
    mu = pen.mu + np.maximum(-pen.mu, s_mu * ineq_buf)
    return PenaltyState(pen.w_h.copy(), pen.w_g.copy(), lam, mu)


_GROUPS = ("terminal", "bound", "heat_rate", "dynamic_pressure", "normal_load", "nfz", "alpha")


def row_group(label: str) -> str:
    for group in _GROUPS:
        if label.startswith(group):
            return group
    raise KeyError(label)


def ptr_penalty(spec: ProblemSpec, weight, linear: float) -> PenaltyState:
    """Frozen weights ``w / N`` per row (``weight`` may map row groups to values)."""
    part = spec.partition

    def weights(labels):
        if isinstance(weight, dict):
            w = [float(weight.get(row_group(lb), weight.get("default", 1000.0))) for lb in labels]
        else:
            w = [float(weight)] * len(labels)
        return np.asarray(w, dtype=float) / spec.N

    return PenaltyState(
        weights(part.labels_h), weights(part.labels_g),
        np.full(part.n_eq, float(linear)), np.full(part.n_ineq, float(linear)),
    )


# ---------------------------------------------------------------- records
@dataclass
class IterationRecord:
    iteration: int
    x: np.ndarray
    u: np.ndarray
    T: np.ndarray
    dx: np.ndarray
    du: np.ndarray
    dT: np.ndarray
    eq_buffer: np.ndarray
    ineq_buffer: np.ndarray
    w_h: np.ndarray
    w_g: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    lam_hat: np.ndarray
    mu_hat: np.ndarray
    eq_residual: np.ndarray  # nonconvex residuals at the updated reference
    ineq_residual: np.ndarray
    max_defect: float
    cost: float  # terminal speed [m/s] of the updated reference
    delta_cost: float
    qp_status: str
    qp_iterations: int
    qp_time: float
    wall_time: float
    max_violation: float = 0.0
    max_normalized_violation: float = 0.0
    converged_branch: str | None = None


@dataclass
class ConvergenceCheck:
    step_ok: bool
    linear_ok: bool
    cost_ok: bool
    nonconvex_ok: bool

    @property
    def branch(self) -> str | None:
        if self.step_ok and self.linear_ok:
            return "step"
        if self.cost_ok and self.nonconvex_ok:
            return "cost"
        return None

    @property
    def converged(self) -> bool:
        return self.branch is not None


def check_convergence(record: IterationRecord, spec: ProblemSpec) -> ConvergenceCheck:
    """Two-branch test: small state step with small buffers, or small cost change with true feasibility.

    Controls and time steps are not part of the step test.
    """
    part = spec.partition
    step_ok = bool(np.all(np.abs(record.dx) <= spec.opt_tol_x[None, :]))
    linear_ok = bool(np.all(np.abs(record.eq_buffer) <= part.tol_h) and np.all(record.ineq_buffer <= part.tol_g))
    cost_ok = abs(record.delta_cost) <= spec.config.tolerances.cost_mps
    nonconvex_ok = bool(np.all(np.abs(record.eq_residual) <= part.tol_h) and np.all(record.ineq_residual <= part.tol_g))
    return ConvergenceCheck(step_ok, linear_ok, cost_ok, nonconvex_ok)


@dataclass
class ValidationSummary:
    max_node_defect: float
    node_defects: np.ndarray
    terminal_error: dict
    terminal_ok: bool
    max_intersample_path: np.ndarray  # per path row, max over the dense trajectory
    error: str | None = None


@dataclass
class SolveReport:
    status: SolveStatus
    method: str
    iterations: list = field(default_factory=list)
    trajectory: ReferenceTrajectory | None = None
    validation: ValidationSummary | None = None
    failure: str | None = None
    failed_iteration: int | None = None
    wall_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def cost(self) -> float:
        return self.iterations[-1].cost if self.iterations else float("nan")

    @property
    def final_violation(self) -> float:
        return self.iterations[-1].max_violation if self.iterations else float("nan")

    def mean_qp_time(self) -> float:
        if not self.iterations:
            return float("nan")
        return float(np.mean([r.qp_time for r in self.iterations]))

    def mean_iteration_time(self) -> float:
        if not self.iterations:
            return float("nan")
        return float(np.mean([r.wall_time for r in self.iterations]))


def validate_trajectory(spec: ProblemSpec, traj: ReferenceTrajectory, substeps: int = 30) -> ValidationSummary:
    """Single-shoot the controls from the initial state and compare with the nodes."""
    model = spec.model
    try:
        dense = single_shoot(model, spec.x0, traj.u, traj.T, substeps=substeps)
    except (PropagationError, SingularStateError) as err:
        return ValidationSummary(np.inf, np.full(spec.N, np.inf), {}, False, np.full(model.n_path_rows, np.inf), str(err))
    defects = np.max(np.abs(dense.nodes - traj.x), axis=1)
    xf = dense.nodes[-1]
    err = {}
    ok = True
    tol_by_state = dict(zip([i for i, _ in spec.terminal_eq], spec.partition.tol_h))
    for i, target in spec.terminal_eq:
        e = float(xf[i] - target)
        err[i] = e
        ok &= abs(e) <= tol_by_state[i]
    for j, (i, lo, hi) in enumerate(spec.terminal_int):
        e = float(max(lo - xf[i], xf[i] - hi, 0.0))
        err[i] = e
        ok &= e <= spec.partition.tol_g[2 * j]
    path = model.path_constraints(dense.x, dense.u)
    return ValidationSummary(
        max_node_defect=float(defects.max()), node_defects=defects, terminal_error=err, terminal_ok=bool(ok),
        max_intersample_path=path.max(axis=0),
    )


# ------------------------------------------------------------------ loop
def _solve(spec: ProblemSpec, guess: ReferenceTrajectory | None, st: SolverSettings, callback=None) -> SolveReport:
    t_start = time.perf_counter()
    report = SolveReport(status=SolveStatus.MAX_ITERATIONS, method=st.method)
    ref = initial_guess(spec) if guess is None else guess.copy()
    part = spec.partition
    adaptive = st.method == "auto"
    if adaptive:
        pen = PenaltyState.initial(part.n_eq, part.n_ineq)
    else:
        pen = ptr_penalty(spec, st.ptr_weight, st.ptr_linear)
    abs_linear = (not adaptive) and st.ptr_linear_mode == "abs" and st.ptr_linear != 0
    eps_h = st.target_fraction * part.eps_h
    eps_g = st.target_fraction * part.eps_g
    qp_settings = st.qp_settings()
    vs = spec.model.scales.velocity_scale

    try:
        disc = discretize(spec.model, ref, st.substeps)
    except (PropagationError, SingularStateError) as err:
        report.status = SolveStatus.SUBPROBLEM_FAILURE
        report.failure = f"discretization of the initial guess failed: {err}"
        report.failed_iteration = 0
        report.trajectory = ref
        return report

    warm = None
    for it in range(1, st.max_iterations + 1):
        t_it = time.perf_counter()
        try:
            sub = build_subproblem(ref, disc, spec, pen, st.s_x, st.s_u, st.dT_fraction, abs_linear)
        except SubproblemError as err:
            report.status, report.failure, report.failed_iteration = SolveStatus.SUBPROBLEM_FAILURE, str(err), it
            break
        t_qp = time.perf_counter()
        sol = solve_qp(sub.qp, qp_settings)
        qp_time = time.perf_counter() - t_qp
        if sol.status is not QpStatus.SOLVED:
            report.status = SolveStatus.SUBPROBLEM_FAILURE
            report.failure = f"QP returned {sol.status.value}"
            report.failed_iteration = it
            break
        dev = extract_solution(sol, sub)
        new_ref = dev.apply(ref)
        try:
            new_disc = discretize(spec.model, new_ref, st.substeps)
        except (PropagationError, SingularStateError) as err:
            report.status = SolveStatus.SUBPROBLEM_FAILURE
            report.failure = f"discretization failed after the update: {err}"
            report.failed_iteration = it
            break
        res = evaluate_nonconvex_residuals(spec, new_ref, new_disc)
        cost_new = spec.cost(new_ref) * vs
        cost_old = spec.cost(ref) * vs
        viol = res.buffered_violation()
        rec = IterationRecord(
            iteration=it, x=new_ref.x, u=new_ref.u, T=new_ref.T,
            dx=dev.dx, du=dev.du, dT=dev.dT, eq_buffer=dev.eq_buffer, ineq_buffer=dev.ineq_buffer,
            w_h=pen.w_h.copy(), w_g=pen.w_g.copy(), lam=pen.lam.copy(), mu=pen.mu.copy(),
            lam_hat=dev.lam_hat, mu_hat=dev.mu_hat, eq_residual=res.eq, ineq_residual=res.ineq,
            max_defect=res.direct["dynamics"], cost=cost_new, delta_cost=cost_new - cost_old,
            qp_status=sol.status.value, qp_iterations=sol.iterations, qp_time=qp_time, wall_time=0.0,
            max_violation=float(np.max(viol, initial=0.0)),
            max_normalized_violation=float(np.max(spec.normalized_violation(res), initial=0.0)),
        )
        check = check_convergence(rec, spec)
        rec.converged_branch = check.branch

        if adaptive:
            pen = update_penalty_weights(pen, dev.eq_buffer, dev.ineq_buffer, eps_h, eps_g, st.eps_w_min)
            pen = update_duals(pen, dev.eq_buffer, dev.ineq_buffer, st.s_lambda, st.s_mu)

        ref, disc = new_ref, new_disc
        rec.wall_time = time.perf_counter() - t_it
        report.iterations.append(rec)
        log.debug("iter %d cost %.2f viol %.3g qp %d its %.3fs", it, cost_new, rec.max_normalized_violation,
                  sol.iterations, qp_time)
        if callback is not None:
            callback(rec)
        if check.converged:
            report.status = SolveStatus.CONVERGED
            break

    report.trajectory = ref
    if st.validate and report.status is not SolveStatus.SUBPROBLEM_FAILURE:
        report.validation = validate_trajectory(spec, ref, st.substeps)
    report.wall_time = time.perf_counter() - t_start
    return report


def autoscvx_solve(spec: ProblemSpec, guess=None, settings: SolverSettings | None = None, callback=None) -> SolveReport:
    st = settings or SolverSettings()
    if st.method != "auto":
        st = SolverSettings(**{**st.__dict__, "method": "auto"})
    return _solve(spec, guess, st, callback)


def ptr_solve(spec: ProblemSpec, guess=None, fixed_weights=1000.0, settings: SolverSettings | None = None,
              callback=None) -> SolveReport:
    st = settings or SolverSettings()
    st = SolverSettings(**{**st.__dict__, "method": "ptr", "ptr_weight": fixed_weights})
    return _solve(spec, guess, st, callback)


# ----------------------------------------------------------- estimators
class _ScvxEstimator(BaseEstimator):
    _method = "auto"

    def _settings(self) -> SolverSettings:
        params = self.get_params()
        params.pop("callback", None)
        return SolverSettings(method=self._method, **params)

    def fit(self, problem: ProblemSpec, guess: ReferenceTrajectory | None = None):
        report = _solve(problem, guess, self._settings(), self.callback)
        self.report_ = report
        self.trajectory_ = report.trajectory
        self.n_iter_ = report.n_iterations
        self.converged_ = report.converged
        self.cost_ = report.cost
        return self


class AutoSCvx(_ScvxEstimator):
    """Self-tuning primal-dual successive convexification."""

    _method = "auto"

    def __init__(self, s_x=0.5, s_u=10.0, s_lambda=0.1, s_mu=1.0, eps_w_min=1e-3, max_iterations=20,
                 target_fraction=0.2, dT_fraction=0.1, substeps=30, qp_eps_abs=1e-8, qp_eps_rel=1e-7,
                 qp_max_iter=50_000, validate=True, callback=None):
        self.s_x = s_x
        self.s_u = s_u
        self.s_lambda = s_lambda
        self.s_mu = s_mu
        self.eps_w_min = eps_w_min
        self.max_iterations = max_iterations
        self.target_fraction = target_fraction
        self.dT_fraction = dT_fraction
        self.substeps = substeps
        self.qp_eps_abs = qp_eps_abs
        self.qp_eps_rel = qp_eps_rel
        self.qp_max_iter = qp_max_iter
        self.validate = validate
        self.callback = callback


class PTR(_ScvxEstimator):
    """Penalized trust region baseline with frozen buffer weights ``ptr_weight / N``."""

    _method = "ptr"

    def __init__(self, ptr_weight=1000.0, ptr_linear=0.0, ptr_linear_mode="signed", s_x=0.5, s_u=10.0,
                 max_iterations=20, dT_fraction=0.1, substeps=30, qp_eps_abs=1e-8, qp_eps_rel=1e-7,
                 qp_max_iter=50_000, validate=True, callback=None):
        self.ptr_weight = ptr_weight
        self.ptr_linear = ptr_linear
        self.ptr_linear_mode = ptr_linear_mode
        self.s_x = s_x
        self.s_u = s_u
        self.max_iterations = max_iterations
        self.dT_fraction = dT_fraction
        self.substeps = substeps
        self.qp_eps_abs = qp_eps_abs
        self.qp_eps_rel = qp_eps_rel
        self.qp_max_iter = qp_max_iter
        self.validate = validate
        self.callback = callback
