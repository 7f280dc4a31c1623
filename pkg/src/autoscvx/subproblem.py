"""Convex primal-update subproblem in deviation variables.

Stacked decision vector (``VariableLayout``)::

    [dx_1..dx_N (6 each) | du_1..du_N (n_u each) | dT_1..dT_{N-1} | p (n_eq) | q (n_ineq) | t (n_abs)]

``t`` only exists when the linear buffer penalty is applied to ``|p|``
(``t >= |p|``); otherwise ``n_abs = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .discretize import DiscretizationResult, ReferenceTrajectory
from .ocp import BufferedRows, ProblemSpec
from .qp import QpProblem, QpSolution, QpStatus
from .vehicle import N_STATES, SIGMA

INF = np.inf


class SubproblemError(ValueError):
    pass


@dataclass
class PenaltyState:
    w_h: np.ndarray
    w_g: np.ndarray
    lam: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.w_h = np.asarray(self.w_h, dtype=float)
        self.w_g = np.asarray(self.w_g, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        if self.w_h.shape != self.lam.shape or self.w_g.shape != self.mu.shape:
            raise ValueError("weights and duals must have matching lengths")
        if np.any(self.w_h <= 0) or np.any(self.w_g <= 0):
            raise ValueError("penalty weights must be positive")
        if np.any(self.mu < 0):
            raise ValueError("inequality duals must be nonnegative")

    @classmethod
    def initial(cls, n_eq: int, n_ineq: int) -> "PenaltyState":
        return cls(np.ones(n_eq), np.ones(n_ineq), np.zeros(n_eq), np.zeros(n_ineq))

    def copy(self) -> "PenaltyState":
        return PenaltyState(self.w_h.copy(), self.w_g.copy(), self.lam.copy(), self.mu.copy())


@dataclass(frozen=True)
class VariableLayout:
    N: int
    n_x: int
    n_u: int
    n_eq: int
    n_ineq: int
    n_abs: int = 0

    @property
    def sizes(self):
        N = self.N
        return (N * self.n_x, N * self.n_u, N - 1, self.n_eq, self.n_ineq, self.n_abs)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def n(self) -> int:
        return int(sum(self.sizes))

    def block(self, i: int) -> slice:
        o = self.offsets
        return slice(int(o[i]), int(o[i + 1]))

    @property
    def x(self):
        return self.block(0)

    @property
    def u(self):
        return self.block(1)

    @property
    def T(self):
        return self.block(2)

    @property
    def eq_buffer(self):
        return self.block(3)

    @property
    def ineq_buffer(self):
        return self.block(4)

    @property
    def abs_bound(self):
        return self.block(5)

    def ix(self, k, i):
        return np.asarray(k) * self.n_x + i

    def iu(self, k, j):
        return self.offsets[1] + np.asarray(k) * self.n_u + j

    def iT(self, k):
        return self.offsets[2] + np.asarray(k)

    def pack(self, sol: "DeviationSolution") -> np.ndarray:
        parts = [sol.dx.ravel(), sol.du.ravel(), sol.dT, sol.eq_buffer, sol.ineq_buffer]
        parts.append(sol.abs_bound if sol.abs_bound is not None else np.zeros(0))
        out = np.concatenate(parts)
        if out.shape != (self.n,):
            raise ValueError("solution does not fit the layout")
        return out


@dataclass
class DeviationSolution:
    dx: np.ndarray  # (N, 6)
    du: np.ndarray  # (N, n_u)
    dT: np.ndarray  # (N-1,)
    eq_buffer: np.ndarray
    ineq_buffer: np.ndarray
    lam_hat: np.ndarray
    mu_hat: np.ndarray
    abs_bound: np.ndarray | None = None

    def apply(self, ref: ReferenceTrajectory) -> ReferenceTrajectory:
        """Full step ``z + dz``."""
        return ReferenceTrajectory(ref.x + self.dx, ref.u + self.du, ref.T + self.dT)


@dataclass
class Subproblem:
    qp: QpProblem
    layout: VariableLayout
    rows: BufferedRows  # buffered rows evaluated at the reference
    eq_rows: slice  # constraint-row positions of the buffered equalities
    ineq_rows: slice


class _Rows:
    """Accumulates sparse constraint rows as COO triplets."""

    def __init__(self):
        self.ri, self.ci, self.vals, self.lo, self.hi = [], [], [], [], []
        self.m = 0

    def add(self, rows, cols, vals, lo, hi):
        rows = np.asarray(rows).ravel()
        self.ri.append(rows + self.m)
        self.ci.append(np.asarray(cols).ravel())
        self.vals.append(np.asarray(vals, dtype=float).ravel())
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.lo.append(lo)
        self.hi.append(np.atleast_1d(np.asarray(hi, dtype=float)))
        start = self.m
        self.m += lo.size
        return slice(start, self.m)

    def matrix(self, n):
        A = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.ri), np.concatenate(self.ci))), shape=(self.m, n)
        ).tocsc()
        A.eliminate_zeros()
        return A, np.concatenate(self.lo), np.concatenate(self.hi)


def _node_local_rows(acc, lay, vals_gx, vals_gu, nodes, buf_cols, rhs_hi, rhs_lo):
    """Rows ``gx.dx_node + gu.du_node - buffer`` within ``[rhs_lo, rhs_hi]``."""
    n_rows = nodes.size
    nx, nu = lay.n_x, lay.n_u
    r = np.arange(n_rows)
    rows = [np.repeat(r, nx), np.repeat(r, nu), r]
    cols = [
        lay.ix(nodes[:, None], np.arange(nx)[None, :]).ravel(),
        lay.iu(nodes[:, None], np.arange(nu)[None, :]).ravel(),
        buf_cols,
    ]
    vals = [vals_gx.ravel(), vals_gu.ravel(), -np.ones(n_rows)]
    return acc.add(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), rhs_lo, rhs_hi)


def build_subproblem(
    ref: ReferenceTrajectory,
    disc: DiscretizationResult,
    spec: ProblemSpec,
    pen: PenaltyState,
    s_x: float = 0.5,
    s_u: float = 10.0,
    dT_fraction: float = 0.1,
    abs_linear: bool = False,
) -> Subproblem:
    N, nu = spec.N, spec.n_u
    nx = N_STATES
    if ref.N != N or ref.u.shape[1] != nu or disc.A.shape[0] != N - 1:
        raise SubproblemError("reference, discretization and problem dimensions disagree")
    n_eq, n_ineq = spec.n_eq, spec.n_ineq
    if pen.w_h.shape != (n_eq,) or pen.w_g.shape != (n_ineq,):
        raise SubproblemError("penalty state does not match the buffered row counts")
    for name in ("A", "B_minus", "B_plus", "S", "x_prop"):
        if not np.all(np.isfinite(getattr(disc, name))):
            raise SubproblemError(f"non-finite entries in discretization {name}")
    if not (s_x > 0 and s_u > 0):
        raise SubproblemError("proximal step sizes must be positive")

    lay = VariableLayout(N, nx, nu, n_eq, n_ineq, n_eq if abs_linear else 0)
    n = lay.n
    acc = _Rows()

    # linear time-varying dynamics, unbuffered
    K = N - 1
    k_idx = np.arange(K)
    rows, cols, vals = [], [], []
    row_of = k_idx[:, None] * nx + np.arange(nx)[None, :]  # (K, 6)
    rows.append(row_of.ravel())
    cols.append(lay.ix(k_idx[:, None] + 1, np.arange(nx)[None, :]).ravel())
    vals.append(np.ones(K * nx))
    rr = np.broadcast_to(row_of[:, :, None], (K, nx, nx))
    rows.append(rr.ravel())
    cols.append(np.broadcast_to(lay.ix(k_idx[:, None, None], np.arange(nx)[None, None, :]), (K, nx, nx)).ravel())
    vals.append(-disc.A.ravel())
    ru = np.broadcast_to(row_of[:, :, None], (K, nx, nu))
    for kk, Bm in ((k_idx, disc.B_minus), (k_idx + 1, disc.B_plus)):
        rows.append(ru.ravel())
        cols.append(np.broadcast_to(lay.iu(kk[:, None, None], np.arange(nu)[None, None, :]), (K, nx, nu)).ravel())
        vals.append(-Bm.ravel())
    rows.append(row_of.ravel())
    cols.append(np.repeat(lay.iT(k_idx), nx))
    vals.append(-disc.S.ravel())
    rhs = (disc.x_prop - ref.x[1:]).ravel()
    acc.add(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), rhs, rhs)

    # initial state and bank angle
    rhs = spec.x0 - ref.x[0]
    acc.add(np.arange(nx), lay.ix(0, np.arange(nx)), np.ones(nx), rhs, rhs)
    rhs = spec.sigma0 - ref.u[0, SIGMA]
    acc.add([0], [lay.iu(0, SIGMA)], [1.0], rhs, rhs)

    # buffered rows
    rows_at_ref = spec.buffered_rows(ref.x, ref.u)
    eq_rows = _node_local_rows(
        acc, lay, rows_at_ref.eq_dx, rows_at_ref.eq_du, rows_at_ref.eq_node,
        np.arange(lay.eq_buffer.start, lay.eq_buffer.stop), -rows_at_ref.eq, -rows_at_ref.eq,
    )
    ineq_rows = _node_local_rows(
        acc, lay, rows_at_ref.ineq_dx, rows_at_ref.ineq_du, rows_at_ref.ineq_node,
        np.arange(lay.ineq_buffer.start, lay.ineq_buffer.stop), -rows_at_ref.ineq, np.full(n_ineq, -INF),
    )

    # control magnitude box
    idx = np.arange(N * nu)
    lo = (spec.u_lo[None, :] - ref.u).ravel()
    hi = (spec.u_hi[None, :] - ref.u).ravel()
    acc.add(idx, lay.iu(0, 0) + idx, np.ones(idx.size), np.minimum(lo, 0.0), np.maximum(hi, 0.0))

    # control rates with the reference time step
    r = np.arange(K * nu)
    kk = np.repeat(k_idx, nu)
    jj = np.tile(np.arange(nu), K)
    du_ref = np.diff(ref.u, axis=0).ravel()
    lim = (spec.rate_max[None, :] * ref.T[:, None]).ravel()
    acc.add(
        np.concatenate([r, r]), np.concatenate([lay.iu(kk + 1, jj), lay.iu(kk, jj)]),
        np.concatenate([np.ones(r.size), -np.ones(r.size)]),
        np.minimum(-lim - du_ref, 0.0), np.maximum(lim - du_ref, 0.0),
    )

    # time-step hard trust region and step bounds
    lo_T, hi_T = spec.T_bounds
    lo = np.maximum(-dT_fraction * ref.T, lo_T - ref.T)
    hi = np.minimum(dT_fraction * ref.T, hi_T - ref.T)
    acc.add(k_idx, lay.iT(k_idx), np.ones(K), np.minimum(lo, 0.0), np.maximum(hi, 0.0))

    # time horizon
    tf = ref.T.sum()
    acc.add(np.zeros(K, dtype=int), lay.iT(k_idx), np.ones(K),
            min(spec.tf_bounds[0] - tf, 0.0), max(spec.tf_bounds[1] - tf, 0.0))

    # wide state box on the states that have finite limits (nodes 2..N)
    box = np.flatnonzero(np.isfinite(spec.x_box_lo) | np.isfinite(spec.x_box_hi))
    nodes = np.repeat(np.arange(1, N), box.size)
    comp = np.tile(box, N - 1)
    lo = spec.x_box_lo[comp] - ref.x[nodes, comp]
    hi = spec.x_box_hi[comp] - ref.x[nodes, comp]
    acc.add(np.arange(nodes.size), lay.ix(nodes, comp), np.ones(nodes.size),
            np.minimum(lo, 0.0), np.maximum(hi, 0.0))

    # nonnegative inequality buffers
    acc.add(np.arange(n_ineq), np.arange(lay.ineq_buffer.start, lay.ineq_buffer.stop), np.ones(n_ineq),
            np.zeros(n_ineq), np.full(n_ineq, INF))

    if abs_linear:
        # t - p >= 0 and t + p >= 0
        j = np.arange(n_eq)
        tcol = np.arange(lay.abs_bound.start, lay.abs_bound.stop)
        pcol = np.arange(lay.eq_buffer.start, lay.eq_buffer.stop)
        acc.add(np.concatenate([j, j]), np.concatenate([tcol, pcol]),
                np.concatenate([np.ones(n_eq), -np.ones(n_eq)]), np.zeros(n_eq), np.full(n_eq, INF))
        acc.add(np.concatenate([j, j]), np.concatenate([tcol, pcol]),
                np.ones(2 * n_eq), np.zeros(n_eq), np.full(n_eq, INF))

    A, l, u = acc.matrix(n)

    diag = np.zeros(n)
    diag[lay.x] = 1.0 / s_x
    diag[lay.u] = 1.0 / s_u
    diag[lay.eq_buffer] = pen.w_h
    diag[lay.ineq_buffer] = pen.w_g
    P = sp.diags(diag, format="csc")
    q = np.zeros(n)
    q[lay.ix(N - 1, spec.cost_index)] = 1.0
    if abs_linear:
        q[lay.abs_bound] = pen.lam
    else:
        q[lay.eq_buffer] = pen.lam
    q[lay.ineq_buffer] = pen.mu
    return Subproblem(QpProblem(P, q, A, l, u), lay, rows_at_ref, eq_rows, ineq_rows)


def extract_solution(sol: QpSolution, sub: Subproblem, buffer_tol: float = 1e-6) -> DeviationSolution:
    """Unpack a QP solution; negative inequality buffers beyond ``buffer_tol`` are an error."""
    if sol.status is not QpStatus.SOLVED and sol.status is not QpStatus.MAX_ITER:
        raise SubproblemError(f"cannot extract from a {sol.status.value} QP")
    lay = sub.layout
    x = np.asarray(sol.x, dtype=float)
    if x.shape != (lay.n,):
        raise SubproblemError("solution length does not match the layout")
    buf = x[lay.ineq_buffer]
    if np.any(buf < -buffer_tol):
        raise SubproblemError(f"negative inequality buffer {buf.min():.3e}")
    return DeviationSolution(
        dx=x[lay.x].reshape(lay.N, lay.n_x).copy(),
        du=x[lay.u].reshape(lay.N, lay.n_u).copy(),
        dT=x[lay.T].copy(),
        eq_buffer=x[lay.eq_buffer].copy(),
        ineq_buffer=buf.copy(),
        lam_hat=np.asarray(sol.y)[sub.eq_rows].copy(),
        mu_hat=np.asarray(sol.y)[sub.ineq_rows].copy(),
        abs_bound=x[lay.abs_bound].copy() if lay.n_abs else None,
    )


def qp_objective(sub: Subproblem, dev: DeviationSolution) -> float:
    return sub.qp.objective(sub.layout.pack(dev))
