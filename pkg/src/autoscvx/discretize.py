"""Exact multiple-shooting discretization with first-order-hold controls.

Each interval is integrated over normalized time ``tau in [0, 1]`` together
with its state-transition matrices, so the LTV model

    x[k+1] - x_prop[k+1] = A[k] dx[k] + Bm[k] du[k] + Bp[k] du[k+1] + S[k] dT[k]

is the exact first-order sensitivity of the flow. All intervals are advanced
simultaneously as one batched RK4 system; no data flows between intervals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vehicle import N_STATES, ReentryVehicle, SingularStateError

DEFAULT_SUBSTEPS = 30
DEFAULT_DENSE = 20


class PropagationError(RuntimeError):
    """Integration hit a singular state.

    ``intervals`` lists the failing interval indices and ``tau`` the
    normalized time of the step at which each failed.
    """

    def __init__(self, message, intervals=(), tau=None):
        super().__init__(message)
        self.intervals = list(intervals)
        self.tau = tau


@dataclass
class ReferenceTrajectory:
    x: np.ndarray  # (N, 6)
    u: np.ndarray  # (N, n_u)
    T: np.ndarray  # (N - 1,)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        self.T = np.asarray(self.T, dtype=float).ravel()
        N = self.x.shape[0]
        if N < 2:
            raise ValueError("a reference trajectory needs at least two nodes")
        if self.x.shape[1] != N_STATES or self.u.shape[0] != N or self.T.shape != (N - 1,):
            raise ValueError(
                f"inconsistent shapes x={self.x.shape} u={self.u.shape} T={self.T.shape}"
            )
        if np.any(self.T <= 0):
            raise ValueError("time steps must be positive")

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def t_final(self) -> float:
        return float(self.T.sum())

    def times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.T)])

    def copy(self) -> "ReferenceTrajectory":
        return ReferenceTrajectory(self.x.copy(), self.u.copy(), self.T.copy())


@dataclass
class DiscretizationResult:
    A: np.ndarray  # (N-1, 6, 6)
    B_minus: np.ndarray  # (N-1, 6, n_u)
    B_plus: np.ndarray  # (N-1, 6, n_u)
    S: np.ndarray  # (N-1, 6)
    x_prop: np.ndarray  # (N-1, 6), propagated state at nodes 2..N

    def defects(self, ref: ReferenceTrajectory) -> np.ndarray:
        """Node-to-propagation mismatch ``x[k+1] - x_prop[k+1]``."""
        return ref.x[1:] - self.x_prop


def foh_control(u_k, u_k1, tau):
    """First-order-hold interpolation ``(1 - tau) u_k + tau u_k1``."""
    u_k = np.asarray(u_k, dtype=float)
    u_k1 = np.asarray(u_k1, dtype=float)
    if u_k.shape != u_k1.shape:
        raise ValueError(f"control shapes differ: {u_k.shape} vs {u_k1.shape}")
    if np.any(np.asarray(tau) < 0) or np.any(np.asarray(tau) > 1):
        raise ValueError("tau must lie in [0, 1]")
    return (1.0 - tau) * u_k + tau * u_k1


def interval_time(t_k, T_k, tau):
    """Physical time at normalized time ``tau`` of an interval."""
    return t_k + T_k * tau


def interval_tau(t_k, T_k, t):
    """Normalized time of physical time ``t`` inside an interval."""
    return (t - t_k) / T_k


def _state_rate(model, x, u0, u1, T, tau):
    u = (1.0 - tau) * u0 + tau * u1
    return T[:, None] * model.dynamics_rhs(x, u, check=False)


def _augmented_rate(model, x, Pa, Pm, Pp, Ps, u0, u1, T, tau):
    u = (1.0 - tau) * u0 + tau * u1
    f = model.dynamics_rhs(x, u, check=False)
    A, B = model.dynamics_jacobians(x, u, check=False)
    TA = T[:, None, None] * A
    TB = T[:, None, None] * B
    dx = T[:, None] * f
    dPa = TA @ Pa
    dPm = TA @ Pm + TB * (1.0 - tau)
    dPp = TA @ Pp + TB * tau
    dPs = np.einsum("kij,kj->ki", TA, Ps) + f
    return dx, dPa, dPm, dPp, dPs


def _bad_rows(model, x):
    with np.errstate(invalid="ignore"):
        bad = ~np.all(np.isfinite(x), axis=-1)
        bad |= x[:, 3] < 1e-3
        bad |= x[:, 0] <= 0
        bad |= np.abs(np.cos(x[:, 4])) < 1e-6
        bad |= np.abs(np.cos(x[:, 2])) < 1e-6
    return bad


def _raise_if_bad(model, x, tau):
    bad = _bad_rows(model, x)
    if np.any(bad):
        idx = np.flatnonzero(bad)
        raise PropagationError(
            f"singular state in interval(s) {idx.tolist()} near tau={tau:.4f}", idx, tau
        )


def propagate_batch(model: ReentryVehicle, x0, u0, u1, T, substeps=DEFAULT_SUBSTEPS):
    """Integrate K intervals at once; returns ``(x_prop, A, Bm, Bp, S)`` at tau = 1."""
    x = np.array(x0, dtype=float, ndmin=2)
    u0 = np.array(u0, dtype=float, ndmin=2)
    u1 = np.array(u1, dtype=float, ndmin=2)
    T = np.atleast_1d(np.asarray(T, dtype=float))
    K, n_u = x.shape[0], u0.shape[1]
    _raise_if_bad(model, x, 0.0)

    Pa = np.broadcast_to(np.eye(N_STATES), (K, N_STATES, N_STATES)).copy()
    Pm = np.zeros((K, N_STATES, n_u))
    Pp = np.zeros((K, N_STATES, n_u))
    Ps = np.zeros((K, N_STATES))
    dtau = 1.0 / substeps
    for i in range(substeps):
        tau = i * dtau
        k1 = _augmented_rate(model, x, Pa, Pm, Pp, Ps, u0, u1, T, tau)
        s2 = [y + 0.5 * dtau * d for y, d in zip((x, Pa, Pm, Pp, Ps), k1)]
        _raise_if_bad(model, s2[0], tau + 0.5 * dtau)
        k2 = _augmented_rate(model, *s2, u0, u1, T, tau + 0.5 * dtau)
        s3 = [y + 0.5 * dtau * d for y, d in zip((x, Pa, Pm, Pp, Ps), k2)]
        _raise_if_bad(model, s3[0], tau + 0.5 * dtau)
        k3 = _augmented_rate(model, *s3, u0, u1, T, tau + 0.5 * dtau)
        s4 = [y + dtau * d for y, d in zip((x, Pa, Pm, Pp, Ps), k3)]
        _raise_if_bad(model, s4[0], tau + dtau)
        k4 = _augmented_rate(model, *s4, u0, u1, T, tau + dtau)
        x, Pa, Pm, Pp, Ps = [
            y + (dtau / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
            for y, d1, d2, d3, d4 in zip((x, Pa, Pm, Pp, Ps), k1, k2, k3, k4)
        ]
        _raise_if_bad(model, x, tau + dtau)
    return x, Pa, Pm, Pp, Ps


def _rk4_state_step(model, x, u0, u1, T, tau, dtau):
    k1 = _state_rate(model, x, u0, u1, T, tau)
    x2 = x + 0.5 * dtau * k1
    _raise_if_bad(model, x2, tau + 0.5 * dtau)
    k2 = _state_rate(model, x2, u0, u1, T, tau + 0.5 * dtau)
    x3 = x + 0.5 * dtau * k2
    _raise_if_bad(model, x3, tau + 0.5 * dtau)
    k3 = _state_rate(model, x3, u0, u1, T, tau + 0.5 * dtau)
    x4 = x + dtau * k3
    _raise_if_bad(model, x4, tau + dtau)
    k4 = _state_rate(model, x4, u0, u1, T, tau + dtau)
    x_new = x + (dtau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _raise_if_bad(model, x_new, tau + dtau)
    return x_new, k1


def propagate_states(model, x0, u0, u1, T, substeps=DEFAULT_SUBSTEPS):
    """State-only counterpart of :func:`propagate_batch` (same arithmetic for x)."""
    x = np.array(x0, dtype=float, ndmin=2)
    u0 = np.array(u0, dtype=float, ndmin=2)
    u1 = np.array(u1, dtype=float, ndmin=2)
    T = np.atleast_1d(np.asarray(T, dtype=float))
    _raise_if_bad(model, x, 0.0)
    dtau = 1.0 / substeps
    for i in range(substeps):
        x, _ = _rk4_state_step(model, x, u0, u1, T, i * dtau, dtau)
    return x


def propagate_interval(model: ReentryVehicle, x_k, u_k, u_k1, T_k, substeps=DEFAULT_SUBSTEPS):
    """Single-interval version returning ``(x_prop, A, B_minus, B_plus, S)``."""
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    u_k1 = np.atleast_1d(np.asarray(u_k1, dtype=float))
    x, Pa, Pm, Pp, Ps = propagate_batch(model, x_k, u_k, u_k1, [T_k], substeps)
    return x[0], Pa[0], Pm[0], Pp[0], Ps[0]


def discretize(model: ReentryVehicle, ref: ReferenceTrajectory, substeps=DEFAULT_SUBSTEPS):
    """Discretize every interval of ``ref`` independently (multiple shooting)."""
    x, Pa, Pm, Pp, Ps = propagate_batch(model, ref.x[:-1], ref.u[:-1], ref.u[1:], ref.T, substeps)
    return DiscretizationResult(A=Pa, B_minus=Pm, B_plus=Pp, S=Ps, x_prop=x)


@dataclass
class DenseTrajectory:
    t: np.ndarray  # (M,)
    x: np.ndarray  # (M, 6)
    u: np.ndarray  # (M, n_u)
    nodes: np.ndarray  # (N, 6), state at each node
    node_index: np.ndarray  # (N,), positions of the nodes within t


def single_shoot(model: ReentryVehicle, x0, u, T, dense_out=DEFAULT_DENSE, substeps=DEFAULT_SUBSTEPS):
    """One continuous forward integration through all intervals with dense output.

    Node values use exactly the discretizer's substep grid; the ``dense_out``
    samples per interval come from cubic Hermite interpolation between substeps.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = np.asarray(T, dtype=float).ravel()
    N = u.shape[0]
    if T.shape != (N - 1,):
        raise ValueError("need N-1 time steps for N controls")
    x = np.array(x0, dtype=float, ndmin=2)
    dtau = 1.0 / substeps
    taus = np.linspace(0.0, 1.0, dense_out + 1)[:-1]
    t0 = 0.0
    ts, xs, us, nodes = [], [], [], [x[0].copy()]
    node_index = [0]
    for k in range(N - 1):
        Tk = T[k:k + 1]
        grid = [x[0].copy()]
        rates = []
        try:
            for i in range(substeps):
                x, k1 = _rk4_state_step(model, x, u[k:k + 1], u[k + 1:k + 2], Tk, i * dtau, dtau)
                grid.append(x[0].copy())
                rates.append(k1[0])
        except PropagationError as err:
            raise PropagationError(f"single shooting failed in interval {k}: {err}", [k], err.tau) from err
        rates.append(_state_rate(model, x, u[k:k + 1], u[k + 1:k + 2], Tk, 1.0)[0])
        grid = np.array(grid)
        rates = np.array(rates)
        for tau in taus:
            i = min(int(tau / dtau), substeps - 1)
            s = (tau - i * dtau) / dtau
            h00 = 2 * s**3 - 3 * s**2 + 1
            h10 = s**3 - 2 * s**2 + s
            h01 = -2 * s**3 + 3 * s**2
            h11 = s**3 - s**2
            xs.append(h00 * grid[i] + h10 * dtau * rates[i] + h01 * grid[i + 1] + h11 * dtau * rates[i + 1])
            ts.append(t0 + T[k] * tau)
            us.append((1.0 - tau) * u[k] + tau * u[k + 1])
        t0 += T[k]
        nodes.append(x[0].copy())
        node_index.append(len(ts))
    ts.append(t0)
    xs.append(x[0].copy())
    us.append(u[-1])
    return DenseTrajectory(
        t=np.array(ts), x=np.array(xs), u=np.array(us), nodes=np.array(nodes), node_index=np.array(node_index)
    )


__all__ = [
    "DiscretizationResult",
    "DenseTrajectory",
    "PropagationError",
    "ReferenceTrajectory",
    "SingularStateError",
    "discretize",
    "foh_control",
    "interval_tau",
    "interval_time",
    "propagate_batch",
    "propagate_interval",
    "propagate_states",
    "single_shoot",
]
