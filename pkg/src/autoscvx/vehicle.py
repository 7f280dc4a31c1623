"""3-DoF unpowered reentry over a spherical rotating planet.

State ``x = [r, theta, phi, v, gamma, psi]`` and control ``u = [sigma]`` or
``u = [sigma, alpha]`` are nondimensional (angles in radians). Every function
broadcasts over leading axes, so ``x`` may be ``(6,)`` or ``(K, 6)``.

The aerodynamic lookup tables carry dimensional coefficients (degrees and m/s),
so speeds are converted to m/s and angles of attack to degrees before table
evaluation.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .scaling import PhysicalConstants, ScaleSet, make_scales

R, THETA, PHI, V, GAMMA, PSI = range(6)
SIGMA, ALPHA = 0, 1
N_STATES = 6

V_FLOOR = 1e-3
EPS_SING = 1e-6
DEG = math.pi / 180.0


class SingularStateError(ArithmeticError):
    """Raised when the right-hand side is evaluated at a singular state."""


class ControlMode(str, enum.Enum):
    BANK_ONLY = "bank"
    BANK_ALPHA = "bank_alpha"

    @property
    def n_u(self) -> int:
        return 1 if self is ControlMode.BANK_ONLY else 2


class StateVector(NamedTuple):
    r: float
    theta: float
    phi: float
    v: float
    gamma: float
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


class ControlVector(NamedTuple):
    mode: ControlMode
    sigma: float
    alpha: float | None = None

    def as_array(self) -> np.ndarray:
        if self.mode is ControlMode.BANK_ONLY:
            return np.array([self.sigma], dtype=float)
        return np.array([self.sigma, self.alpha], dtype=float)


@dataclass(frozen=True)
class VehicleParams:
    """Vehicle mass/area, aero table coefficients and control limits.

    ``K_alpha1`` is in degrees, ``K_alpha2`` in deg s^2/m^2 and ``V_lim`` in
    m/s, as printed for the lookup tables. Angle limits are in radians.
    """

    mass: float = 104305.0
    S_ref: float = 391.2
    K_L1: float = -0.041065
    K_L2: float = 0.016292
    K_L3: float = 0.0002602
    K_D1: float = 0.080505
    K_D2: float = -0.03026
    K_D3: float = 0.86495
    K_alpha1: float = 40.0
    K_alpha2: float = 1.7910e-6
    V_lim: float = 4570.0
    alpha_slack: float = 5.0 * DEG
    sigma_max: float = 80.0 * DEG
    sigma_dot_max: float = 10.0 * DEG
    alpha_dot_max: float = 5.0 * DEG
    alpha_floor: float = 0.0
    alpha_ceiling: float = 40.0 * DEG

    def __post_init__(self):
        for name in ("mass", "S_ref", "V_lim", "sigma_max", "sigma_dot_max", "alpha_dot_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    # Velocity-polynomial lift coefficients obtained by substituting the
    # angle-of-attack profile into the quadratic lift table.
    @property
    def Kbar_L1(self) -> float:
        return self.K_L1 + self.K_L2 * self.K_alpha1 + self.K_L3 * self.K_alpha1**2

    @property
    def Kbar_L2(self) -> float:
        return -self.K_L2 * self.K_alpha2 - 2.0 * self.K_L3 * self.K_alpha1 * self.K_alpha2

    @property
    def Kbar_L3(self) -> float:
        return self.K_L3 * self.K_alpha2**2


@dataclass(frozen=True)
class PathLimits:
    """Dimensional path limits. ``n_g_max`` is an acceleration in m/s^2."""

    Q_dot_max: float = 1e5 / 3.0
    q_dyn_max: float = 18e3
    n_g_max: float = 2.5 * 9.81
    k_Q: float = 1.2036e-5
    nfz: tuple = field(default_factory=tuple)  # ((theta_c, phi_c, radius), ...) in radians

    def __post_init__(self):
        if not (self.Q_dot_max > 0 and self.q_dyn_max > 0 and self.n_g_max > 0 and self.k_Q > 0):
            raise ValueError("path limits must be positive")
        for zone in self.nfz:
            if len(zone) != 3 or not zone[2] > 0:
                raise ValueError(f"bad no-fly zone {zone!r}")


class ReentryVehicle:
    """Dynamics, Jacobians and constraint rows for one vehicle/mode pairing."""

    def __init__(
        self,
        params: VehicleParams | None = None,
        limits: PathLimits | None = None,
        mode: ControlMode = ControlMode.BANK_ONLY,
        constants: PhysicalConstants | None = None,
    ):
        self.params = params or VehicleParams()
        self.limits = limits or PathLimits()
        self.mode = ControlMode(mode)
        self.constants = constants or PhysicalConstants()
        self.scales: ScaleSet = make_scales(self.constants)

        c, p, lim = self.constants, self.params, self.limits
        self.omega = c.omega_earth * self.scales.time_scale
        self.beta_R = c.R_earth * c.beta
        self.aero_k = c.R_earth * p.S_ref / (2.0 * p.mass)
        vs = self.scales.velocity_scale
        self.kbar_Q = lim.k_Q * c.rho_sl * vs**3 / lim.Q_dot_max
        self.kbar_q = c.rho_sl * c.g_earth * c.R_earth / (2.0 * lim.q_dyn_max)
        # load factor limit expressed in g's
        self.kbar_n = c.rho_sl * c.R_earth * p.S_ref / (2.0 * p.mass * (lim.n_g_max / c.g_earth))
        self.nfz = np.array(lim.nfz, dtype=float).reshape(-1, 3)

    @property
    def n_u(self) -> int:
        return self.mode.n_u

    @property
    def n_nfz(self) -> int:
        return self.nfz.shape[0]

    # ------------------------------------------------------------------ tables
    def alpha_profile_deg(self, v):
        """Design angle of attack in degrees and its derivative w.r.t. nondim v."""
        p = self.params
        vs = self.scales.velocity_scale
        dv = np.asarray(v, dtype=float) * vs - p.V_lim
        low = dv <= 0.0
        alpha = np.where(low, p.K_alpha1 - p.K_alpha2 * dv**2, p.K_alpha1)
        dalpha = np.where(low, -2.0 * p.K_alpha2 * dv * vs, 0.0)
        return alpha, dalpha

    def alpha_profile(self, v):
        """Design angle of attack [rad] as a function of nondim speed."""
        return self.alpha_profile_deg(v)[0] * DEG

    def _cl_cd_alpha(self, alpha_deg):
        p = self.params
        cl = p.K_L1 + p.K_L2 * alpha_deg + p.K_L3 * alpha_deg**2
        dcl = p.K_L2 + 2.0 * p.K_L3 * alpha_deg
        cd = p.K_D1 + p.K_D2 * cl + p.K_D3 * cl**2
        dcd = (p.K_D2 + 2.0 * p.K_D3 * cl) * dcl
        return cl, cd, dcl, dcd

    def _cl_cd_velocity(self, v):
        p = self.params
        vs = self.scales.velocity_scale
        dv = np.asarray(v, dtype=float) * vs - p.V_lim
        low = dv <= 0.0
        cl = np.where(low, p.Kbar_L1 + p.Kbar_L2 * dv**2 + p.Kbar_L3 * dv**4, p.Kbar_L1)
        dcl = np.where(low, (2.0 * p.Kbar_L2 * dv + 4.0 * p.Kbar_L3 * dv**3) * vs, 0.0)
        cd = p.K_D1 + p.K_D2 * cl + p.K_D3 * cl**2
        dcd = (p.K_D2 + 2.0 * p.K_D3 * cl) * dcl
        return cl, cd, dcl, dcd

    def aero_partials(self, v, u):
        """Return ``(C_L, C_D, dC_L/dv, dC_D/dv, dC_L/dalpha, dC_D/dalpha)``.

        Derivatives are w.r.t. nondim speed and angle of attack in radians;
        whichever does not apply to the current mode is zero.
        """
        u = np.asarray(u, dtype=float)
        if self.mode is ControlMode.BANK_ONLY:
            cl, cd, dcl, dcd = self._cl_cd_velocity(v)
            zero = np.zeros_like(cl)
            return cl, cd, dcl, dcd, zero, zero
        cl, cd, dcl, dcd = self._cl_cd_alpha(u[..., ALPHA] / DEG)
        zero = np.zeros_like(cl)
        return cl, cd, zero, zero, dcl / DEG, dcd / DEG

    def aero_coeffs(self, v, u):
        cl, cd = self.aero_partials(v, u)[:2]
        return cl, cd

    # --------------------------------------------------------------- atmosphere
    def density(self, r):
        """Exponential-atmosphere density [kg/m^3] at nondim radius ``r``."""
        return self.constants.rho_sl * np.exp(-self.beta_R * (np.asarray(r, dtype=float) - 1.0))

    def lift_drag(self, x, u):
        x = np.asarray(x, dtype=float)
        cl, cd = self.aero_coeffs(x[..., V], u)
        qdyn = self.aero_k * self.density(x[..., R]) * x[..., V] ** 2
        return qdyn * cl, qdyn * cd

    # ----------------------------------------------------------------- dynamics
    def check_state(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise SingularStateError("non-finite state")
        if np.any(x[..., V] < V_FLOOR):
            raise SingularStateError(f"speed below floor {V_FLOOR}")
        if np.any(np.abs(np.cos(x[..., GAMMA])) < EPS_SING) or np.any(np.abs(np.cos(x[..., PHI])) < EPS_SING):
            raise SingularStateError("cos(gamma) or cos(phi) vanishes")
        if np.any(x[..., R] <= 0.0):
            raise SingularStateError("non-positive radius")

    def dynamics_rhs(self, x, u, check=True):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if check:
            self.check_state(x)
        r, phi, v, gam, psi = x[..., R], x[..., PHI], x[..., V], x[..., GAMMA], x[..., PSI]
        sig = u[..., SIGMA]
        L, D = self.lift_drag(x, u)
        W = self.omega
        sg, cg = np.sin(gam), np.cos(gam)
        sp, cp = np.sin(phi), np.cos(phi)
        ss, cs = np.sin(psi), np.cos(psi)
        tg, tp = sg / cg, sp / cp

        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (N_STATES,)))
        out[..., 0] = v * sg
        out[..., 1] = v * cg * ss / (r * cp)
        out[..., 2] = v * cg * cs / r
        out[..., 3] = -D - sg / r**2 + W**2 * r * cp * (sg * cp - cg * sp * cs)
        out[..., 4] = (
            L * np.cos(sig)
            + (v**2 - 1.0 / r) * (cg / r)
            + 2.0 * W * v * cp * ss
            + W**2 * r * cp * (cg * cp + sg * cs * sp)
        ) / v
        out[..., 5] = (
            L * np.sin(sig) / cg
            + (v**2 / r) * cg * ss * tp
            - 2.0 * W * v * (tg * cs * cp - sp)
            + (W**2 * r / cg) * ss * sp * cp
        ) / v
        return out

    def dynamics_jacobians(self, x, u, check=True):
        """Analytic ``(A, B) = (df/dx, df/du)`` with shapes ``(..., 6, 6)``, ``(..., 6, n_u)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if check:
            self.check_state(x)
        r, phi, v, gam, psi = x[..., R], x[..., PHI], x[..., V], x[..., GAMMA], x[..., PSI]
        sig = u[..., SIGMA]
        W = self.omega
        bR = self.beta_R
        cl, cd, dcl_v, dcd_v, dcl_a, dcd_a = self.aero_partials(v, u)
        qbar = self.aero_k * self.density(r)
        L, D = qbar * v**2 * cl, qbar * v**2 * cd
        L_r, D_r = -bR * L, -bR * D
        L_v = 2.0 * qbar * v * cl + qbar * v**2 * dcl_v
        D_v = 2.0 * qbar * v * cd + qbar * v**2 * dcd_v
        L_a, D_a = qbar * v**2 * dcl_a, qbar * v**2 * dcd_a

        sg, cg = np.sin(gam), np.cos(gam)
        sp, cp = np.sin(phi), np.cos(phi)
        ss, cs = np.sin(psi), np.cos(psi)
        ssig, csig = np.sin(sig), np.cos(sig)
        tg, tp = sg / cg, sp / cp

        shape = np.broadcast_shapes(x.shape, u.shape[:-1] + (N_STATES,))[:-1]
        A = np.zeros(shape + (6, 6))
        B = np.zeros(shape + (6, self.n_u))

        # r-dot
        A[..., 0, V] = sg
        A[..., 0, GAMMA] = v * cg

        # theta-dot
        f2 = v * cg * ss / (r * cp)
        A[..., 1, R] = -f2 / r
        A[..., 1, PHI] = f2 * tp
        A[..., 1, V] = cg * ss / (r * cp)
        A[..., 1, GAMMA] = -v * sg * ss / (r * cp)
        A[..., 1, PSI] = v * cg * cs / (r * cp)

        # phi-dot
        A[..., 2, R] = -v * cg * cs / r**2
        A[..., 2, V] = cg * cs / r
        A[..., 2, GAMMA] = -v * sg * cs / r
        A[..., 2, PSI] = -v * cg * ss / r

        # v-dot
        a4 = sg * cp - cg * sp * cs
        A[..., 3, R] = -D_r + 2.0 * sg / r**3 + W**2 * cp * a4
        A[..., 3, PHI] = W**2 * r * (-sp * a4 + cp * (-sg * sp - cg * cp * cs))
        A[..., 3, V] = -D_v
        A[..., 3, GAMMA] = -cg / r**2 + W**2 * r * cp * (cg * cp + sg * sp * cs)
        A[..., 3, PSI] = W**2 * r * cp * cg * sp * ss

        # gamma-dot = g5 / v
        b5 = cg * cp + sg * cs * sp
        g5 = L * csig + (v**2 - 1.0 / r) * (cg / r) + 2.0 * W * v * cp * ss + W**2 * r * cp * b5
        A[..., 4, R] = (
            L_r * csig + cg / r**3 - (v**2 - 1.0 / r) * cg / r**2 + W**2 * cp * b5
        ) / v
        A[..., 4, PHI] = (
            -2.0 * W * v * sp * ss + W**2 * r * (-sp * b5 + cp * (-cg * sp + sg * cs * cp))
        ) / v
        A[..., 4, V] = (L_v * csig + 2.0 * v * cg / r + 2.0 * W * cp * ss) / v - g5 / v**2
        A[..., 4, GAMMA] = (
            -(v**2 - 1.0 / r) * sg / r + W**2 * r * cp * (-sg * cp + cg * cs * sp)
        ) / v
        A[..., 4, PSI] = (2.0 * W * v * cp * cs - W**2 * r * cp * sg * ss * sp) / v
        B[..., 4, SIGMA] = -L * ssig / v

        # psi-dot = g6 / v
        g6 = (
            L * ssig / cg
            + (v**2 / r) * cg * ss * tp
            - 2.0 * W * v * (tg * cs * cp - sp)
            + (W**2 * r / cg) * ss * sp * cp
        )
        A[..., 5, R] = (
            L_r * ssig / cg - (v**2 / r**2) * cg * ss * tp + (W**2 / cg) * ss * sp * cp
        ) / v
        A[..., 5, PHI] = (
            (v**2 / r) * cg * ss / cp**2
            - 2.0 * W * v * (-tg * cs * sp - cp)
            + (W**2 * r / cg) * ss * (cp**2 - sp**2)
        ) / v
        A[..., 5, V] = (
            L_v * ssig / cg + (2.0 * v / r) * cg * ss * tp - 2.0 * W * (tg * cs * cp - sp)
        ) / v - g6 / v**2
        A[..., 5, GAMMA] = (
            L * ssig * sg / cg**2
            - (v**2 / r) * sg * ss * tp
            - 2.0 * W * v * cs * cp / cg**2
            + W**2 * r * sg / cg**2 * ss * sp * cp
        ) / v
        A[..., 5, PSI] = (
            (v**2 / r) * cg * cs * tp + 2.0 * W * v * tg * ss * cp + (W**2 * r / cg) * cs * sp * cp
        ) / v
        B[..., 5, SIGMA] = L * csig / (cg * v)

        if self.mode is ControlMode.BANK_ALPHA:
            B[..., 3, ALPHA] = -D_a
            B[..., 4, ALPHA] = L_a * csig / v
            B[..., 5, ALPHA] = L_a * ssig / (cg * v)
        return A, B

    # -------------------------------------------------------------- constraints
    def alpha_bounds(self, v):
        """Velocity-dependent angle-of-attack corridor ``(lo, hi, dlo/dv, dhi/dv)`` in radians."""
        p = self.params
        vs = self.scales.velocity_scale
        v = np.asarray(v, dtype=float)
        dv = np.minimum(v * vs, p.V_lim) - p.V_lim
        prof = p.K_alpha1 - p.K_alpha2 * dv**2
        dprof = np.where(v * vs < p.V_lim, -2.0 * p.K_alpha2 * dv * vs, 0.0)
        slack = p.alpha_slack / DEG
        lo_raw = prof - slack
        hi_raw = prof + slack
        floor = p.alpha_floor / DEG
        lo = np.maximum(floor, lo_raw)
        ceil = p.alpha_ceiling / DEG
        hi = np.minimum(ceil, hi_raw)
        dlo = np.where(lo_raw > floor, dprof, 0.0)
        dhi = np.where(hi_raw < ceil, dprof, 0.0)
        return lo * DEG, hi * DEG, dlo * DEG, dhi * DEG

    @property
    def n_control_rows(self) -> int:
        return 1 if self.mode is ControlMode.BANK_ONLY else 3

    def control_constraints(self, x, u):
        """Control rows (feasible when <= 0): ``|sigma| - sigma_max`` then the alpha corridor."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        rows = [np.abs(u[..., SIGMA]) - self.params.sigma_max]
        if self.mode is ControlMode.BANK_ALPHA:
            lo, hi, _, _ = self.alpha_bounds(x[..., V])
            rows.append(u[..., ALPHA] - hi)
            rows.append(lo - u[..., ALPHA])
        return np.stack(rows, axis=-1)

    def alpha_constraints(self, x, u):
        """The two nonconvex alpha rows and their gradients w.r.t. x and u."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        lo, hi, dlo, dhi = self.alpha_bounds(x[..., V])
        vals = np.stack([u[..., ALPHA] - hi, lo - u[..., ALPHA]], axis=-1)
        gx = np.zeros(vals.shape + (N_STATES,))
        gu = np.zeros(vals.shape + (self.n_u,))
        gx[..., 0, V] = -dhi
        gx[..., 1, V] = dlo
        gu[..., 0, ALPHA] = 1.0
        gu[..., 1, ALPHA] = -1.0
        return vals, gx, gu

    @property
    def n_path_rows(self) -> int:
        return 3 + self.n_nfz

    def path_constraints(self, x, u):
        """Heat rate, dynamic pressure, normal load and no-fly-zone rows (feasible when <= 0)."""
        return self.path_constraints_with_grad(x, u)[0]

    def path_constraints_with_grad(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        r, th, phi, v = x[..., R], x[..., THETA], x[..., PHI], x[..., V]
        bR = self.beta_R
        e_half = np.exp(-0.5 * bR * (r - 1.0))
        e_full = e_half * e_half
        cl, cd, dcl_v, dcd_v, dcl_a, dcd_a = self.aero_partials(v, u)
        cn = np.sqrt(cl**2 + cd**2)

        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        n_rows = self.n_path_rows
        vals = np.empty(shape + (n_rows,))
        gx = np.zeros(shape + (n_rows, N_STATES))
        gu = np.zeros(shape + (n_rows, self.n_u))

        heat = self.kbar_Q * e_half * v**3
        vals[..., 0] = heat - 1.0
        gx[..., 0, R] = -0.5 * bR * heat
        gx[..., 0, V] = 3.0 * self.kbar_Q * e_half * v**2

        dyn = self.kbar_q * e_full * v**2
        vals[..., 1] = dyn - 1.0
        gx[..., 1, R] = -bR * dyn
        gx[..., 1, V] = 2.0 * self.kbar_q * e_full * v

        base = self.kbar_n * e_full * v**2
        load = base * cn
        vals[..., 2] = load - 1.0
        gx[..., 2, R] = -bR * load
        gx[..., 2, V] = 2.0 * self.kbar_n * e_full * v * cn + base * (cl * dcl_v + cd * dcd_v) / cn
        if self.mode is ControlMode.BANK_ALPHA:
            gu[..., 2, ALPHA] = base * (cl * dcl_a + cd * dcd_a) / cn

        for j, (tc, pc, rad) in enumerate(self.nfz):
            vals[..., 3 + j] = rad**2 - (th - tc) ** 2 - (phi - pc) ** 2
            gx[..., 3 + j, THETA] = -2.0 * (th - tc)
            gx[..., 3 + j, PHI] = -2.0 * (phi - pc)
        return vals, gx, gu
