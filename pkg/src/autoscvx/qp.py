"""Sparse convex QP solved by operator splitting (ADMM) with solution polishing.

Problem form::

    minimize    1/2 x'Px + q'x
    subject to  l <= Ax <= u

Equality rows have ``l == u``; one-sided rows use ``+-inf``. The dual vector
``y`` follows the convention ``Px + q + A'y = 0`` with ``y >= 0`` on active
upper bounds and ``y <= 0`` on active lower bounds.

Debug dumps (:func:`dump_triplets`) are plain text::

    n m
    P <nnz>            then nnz lines "i j value" (0-based, upper triangle)
    q                  then n lines
    A <nnz>            then nnz lines "i j value"
    l                  then m lines   (inf written as "inf"/"-inf")
    u                  then m lines
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = np.inf
RHO_MIN, RHO_MAX = 1e-6, 1e6
RHO_EQ_FACTOR = 1e3


class QpStatus(str, enum.Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"


@dataclass
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = sp.csc_matrix(self.P, dtype=float)
        self.A = sp.csc_matrix(self.A, dtype=float)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n, m = self.n, self.m
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n or self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError("A, l, u dimensions are inconsistent")
        if np.any(self.l > self.u):
            raise ValueError("lower bounds exceed upper bounds")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.P.data)) and np.all(np.isfinite(self.A.data))):
            raise ValueError("non-finite problem data")
        if abs(self.P - self.P.T).max() > 1e-10 * max(1.0, abs(self.P).max()):
            raise ValueError("P must be symmetric")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def scaled(self, c: float) -> "QpProblem":
        return QpProblem(self.P * c, self.q * c, self.A, self.l, self.u)


@dataclass
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-7
    eps_prim_inf: float = 1e-9
    eps_dual_inf: float = 1e-9
    max_iter: int = 50_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iters: int = 10
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 10
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine_iter: int = 5
    time_limit: float | None = None


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float = float("nan")
    polished: bool = False
    solve_time: float = 0.0
    certificate: np.ndarray | None = field(default=None, repr=False)

    @property
    def solved(self) -> bool:
        return self.status is QpStatus.SOLVED


def kkt_residuals(prob: QpProblem, x, y):
    """Unscaled ``(primal, dual, complementarity)`` infinity-norm residuals."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    Ax = prob.A @ x
    r_p = np.maximum(prob.l - Ax, 0.0) + np.maximum(Ax - prob.u, 0.0)
    r_d = prob.P @ x + prob.q + prob.A.T @ y
    gap = np.where(y > 0, prob.u - Ax, np.where(y < 0, Ax - prob.l, 0.0))
    # a multiplier on an unbounded side is itself the violation
    gap = np.where(np.isfinite(gap), np.abs(gap), 1.0)
    compl = np.abs(y) * gap
    compl = np.where(y == 0, 0.0, compl)
    return (
        float(np.max(r_p, initial=0.0)),
        float(np.max(np.abs(r_d), initial=0.0)),
        float(np.max(compl, initial=0.0)),
    )


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _col_inf_norms(M: sp.csc_matrix) -> np.ndarray:
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _row_inf_norms(M: sp.csc_matrix) -> np.ndarray:
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


def _limit(v, lo=1e-4, hi=1e4):
    v = np.where(v < lo, 1.0, v)
    return np.minimum(v, hi)


class _Scaling:
    """Ruiz equilibration of the KKT matrix plus a cost scaling factor."""

    def __init__(self, prob: QpProblem, iters: int):
        n, m = prob.n, prob.m
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0
        P, q, A = prob.P.copy(), prob.q.copy(), prob.A.copy()
        for _ in range(iters):
            cn = np.maximum(_col_inf_norms(P), _col_inf_norms(A)) if m else _col_inf_norms(P)
            d = 1.0 / np.sqrt(_limit(cn))
            e = 1.0 / np.sqrt(_limit(_row_inf_norms(A))) if m else np.ones(0)
            Dd, Ed = sp.diags(d), sp.diags(e)
            P = (Dd @ P @ Dd).tocsc()
            A = (Ed @ A @ Dd).tocsc()
            q = d * q
            D *= d
            E *= e
            mean_p = float(np.mean(_col_inf_norms(P))) if n else 1.0
            gamma = 1.0 / float(_limit(np.array([max(mean_p, _inf_norm(q))]))[0])
            P = P * gamma
            q = q * gamma
            c *= gamma
        self.D, self.E, self.c = D, E, c
        self.P, self.q, self.A = P.tocsc(), q, A.tocsc()
        self.l = E * prob.l
        self.u = E * prob.u


class QpSolver:
    """Single-use ADMM solver instance."""

    def __init__(self, prob: QpProblem, settings: QpSettings | None = None):
        self.prob = prob
        self.settings = settings or QpSettings()
        self.scaling = _Scaling(prob, self.settings.scaling_iters)
        s = self.scaling
        self._eq = (prob.l == prob.u)
        self._free = np.isinf(prob.l) & np.isinf(prob.u)
        self._set_rho(self.settings.rho)

    def _set_rho(self, rho: float):
        rho = float(np.clip(rho, RHO_MIN, RHO_MAX))
        self.rho = rho
        rv = np.full(self.prob.m, rho)
        rv[self._eq] = RHO_EQ_FACTOR * rho
        rv[self._free] = RHO_MIN
        self.rho_vec = rv
        n = self.prob.n
        s = self.scaling
        K = sp.bmat(
            [[s.P + self.settings.sigma * sp.identity(n), s.A.T], [s.A, sp.diags(-1.0 / rv)]],
            format="csc",
        )
        self._kkt = spla.splu(K)

    # ------------------------------------------------------------------ helpers
    def _unscaled_residuals(self, x, z, y):
        s = self.scaling
        Ax = s.A @ x
        Px = s.P @ x
        Aty = s.A.T @ y
        prim = _inf_norm((Ax - z) / s.E)
        dual = _inf_norm((Px + s.q + Aty) / s.D) / s.c
        prim_scale = max(_inf_norm(Ax / s.E), _inf_norm(z / s.E))
        dual_scale = max(_inf_norm(Px / s.D), _inf_norm(Aty / s.D), _inf_norm(s.q / s.D)) / s.c
        return prim, dual, prim_scale, dual_scale

    def _adapt_rho(self, x, z, y):
        """Balance the scaled primal and dual residuals (square-root rule)."""
        s, st = self.scaling, self.settings
        Ax, Px, Aty = s.A @ x, s.P @ x, s.A.T @ y
        prim = _inf_norm(Ax - z) / max(_inf_norm(Ax), _inf_norm(z), 1e-30)
        dual = _inf_norm(Px + s.q + Aty) / max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(s.q), 1e-30)
        rho_new = float(np.clip(self.rho * np.sqrt(prim / max(dual, 1e-30)), RHO_MIN, RHO_MAX))
        if rho_new > st.adaptive_rho_tolerance * self.rho or rho_new < self.rho / st.adaptive_rho_tolerance:
            self._set_rho(rho_new)

    def _project(self, v):
        s = self.scaling
        return np.minimum(np.maximum(v, s.l), s.u)

    def _primal_infeasible(self, dy) -> bool:
        s = self.scaling
        eps = self.settings.eps_prim_inf
        dy_unscaled = s.E * dy
        norm_dy = _inf_norm(dy_unscaled)
        if norm_dy <= eps:
            return False
        dy_n = dy / norm_dy
        if _inf_norm((s.A.T @ dy_n) / s.D) > eps:
            return False
        pos, neg = np.maximum(dy_n, 0.0), np.minimum(dy_n, 0.0)
        if np.any((pos > 0) & np.isinf(s.u)) or np.any((neg < 0) & np.isinf(s.l)):
            return False
        ub = np.where(pos > 0, s.u, 0.0) @ pos
        lb = np.where(neg < 0, s.l, 0.0) @ neg
        return ub + lb < -eps

    def _dual_infeasible(self, dx) -> bool:
        s = self.scaling
        eps = self.settings.eps_dual_inf
        norm_dx = _inf_norm(s.D * dx)
        if norm_dx <= eps:
            return False
        dx_n = dx / norm_dx
        if _inf_norm((s.P @ dx_n) / s.D) > eps * s.c:
            return False
        if s.q @ dx_n >= -eps * s.c:
            return False
        Adx = (s.A @ dx_n) / s.E
        ok_u = np.isinf(s.u) | (Adx <= eps)
        ok_l = np.isinf(s.l) | (Adx >= -eps)
        return bool(np.all(ok_u & ok_l))

    def _polish(self, x, z, y):
        """Solve the equality-constrained QP on the active set guessed from (z, y)."""
        prob, st = self.prob, self.settings
        s = self.scaling
        xu = s.D * x
        yu = s.E * y / s.c
        zu = z / s.E
        low = (zu - prob.l < -yu) | self._eq
        up = (prob.u - zu < yu) & ~low
        act = np.flatnonzero(low | up)
        b = np.where(low, prob.l, prob.u)[act]
        A_act = prob.A[act]
        n, na = prob.n, act.size
        delta = st.polish_delta
        K_reg = sp.bmat(
            [[prob.P + delta * sp.identity(n), A_act.T], [A_act, -delta * sp.identity(na)]],
            format="csc",
        )
        K = sp.bmat([[prob.P, A_act.T], [A_act, None]], format="csc") if na else prob.P.tocsc()
        try:
            lu = spla.splu(K_reg)
        except RuntimeError:
            return None
        rhs = np.concatenate([-prob.q, b])
        sol = lu.solve(rhs)
        for _ in range(st.polish_refine_iter):
            sol = sol + lu.solve(rhs - K @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        x_p = sol[:n]
        y_p = np.zeros(prob.m)
        y_p[act] = sol[n:]
        # dual signs must agree with the bound each row was assigned to
        y_p[self._eq] = y_p[self._eq]
        tol = max(st.eps_abs, 1e-9) * 10
        ineq_low = low & ~self._eq
        if np.any(y_p[ineq_low] > tol) or np.any(y_p[up] < -tol):
            return None
        return x_p, y_p

    def _accept(self, x, y):
        """Check unscaled KKT residuals of a candidate against the tolerances."""
        prob, st = self.prob, self.settings
        Ax = prob.A @ x
        z = np.clip(Ax, prob.l, prob.u)
        prim = _inf_norm(Ax - z)
        Px, Aty = prob.P @ x, prob.A.T @ y
        dual = _inf_norm(Px + prob.q + Aty)
        ep = st.eps_abs + st.eps_rel * max(_inf_norm(Ax), _inf_norm(z))
        ed = st.eps_abs + st.eps_rel * max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(prob.q))
        return prim <= ep and dual <= ed, prim, dual

    def solve(self, x0=None, y0=None) -> QpSolution:
        prob, st, s = self.prob, self.settings, self.scaling
        t_start = time.perf_counter()
        n, m = prob.n, prob.m
        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / s.D
        y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float) * s.c / s.E
        z = self._project(s.A @ x)
        sigma, alpha = st.sigma, st.alpha
        rhs = np.empty(n + m)
        prim = dual = INF
        last_polish = -INF
        it = 0
        for it in range(1, st.max_iter + 1):
            x_prev, y_prev = x, y
            rhs[:n] = sigma * x - s.q
            rhs[n:] = z - y / self.rho_vec
            sol = self._kkt.solve(rhs)
            xt = sol[:n]
            zt = z + (sol[n:] - y) / self.rho_vec
            x = alpha * xt + (1.0 - alpha) * x
            zr = alpha * zt + (1.0 - alpha) * z
            z_new = self._project(zr + y / self.rho_vec)
            y = y + self.rho_vec * (zr - z_new)
            z = z_new

            if it % st.check_interval and it != st.max_iter:
                continue
            prim, dual, ps, ds = self._unscaled_residuals(x, z, y)
            eps_p = st.eps_abs + st.eps_rel * ps
            eps_d = st.eps_abs + st.eps_rel * ds
            if prim <= eps_p and dual <= eps_d:
                return self._finish(x, z, y, QpStatus.SOLVED, it, t_start)
            if st.polish and prim <= 1e3 * eps_p + 1e-5 * max(ps, 1.0) and dual <= 1e3 * eps_d + 1e-5 * max(ds, 1.0):
                if it - last_polish >= 5 * st.check_interval:
                    last_polish = it
                    polished = self._polish(x, z, y)
                    if polished is not None:
                        ok, p_res, d_res = self._accept(*polished)
                        if ok:
                            return QpSolution(
                                x=polished[0], y=polished[1], status=QpStatus.SOLVED, iterations=it,
                                primal_residual=p_res, dual_residual=d_res,
                                objective=prob.objective(polished[0]), polished=True,
                                solve_time=time.perf_counter() - t_start,
                            )
            if self._primal_infeasible(y - y_prev):
                sol = self._finish(x, z, y, QpStatus.PRIMAL_INFEASIBLE, it, t_start)
                sol.certificate = s.E * (y - y_prev) / max(_inf_norm(s.E * (y - y_prev)), 1e-300)
                return sol
            if self._dual_infeasible(x - x_prev):
                sol = self._finish(x, z, y, QpStatus.DUAL_INFEASIBLE, it, t_start)
                sol.certificate = s.D * (x - x_prev) / max(_inf_norm(s.D * (x - x_prev)), 1e-300)
                return sol
            if st.time_limit is not None and time.perf_counter() - t_start > st.time_limit:
                break
            if st.adaptive_rho and it % st.adaptive_rho_interval == 0:
                self._adapt_rho(x, z, y)

        if st.polish:
            polished = self._polish(x, z, y)
            if polished is not None:
                ok, p_res, d_res = self._accept(*polished)
                if ok:
                    return QpSolution(
                        x=polished[0], y=polished[1], status=QpStatus.SOLVED, iterations=it,
                        primal_residual=p_res, dual_residual=d_res,
                        objective=prob.objective(polished[0]), polished=True,
                        solve_time=time.perf_counter() - t_start,
                    )
        return self._finish(x, z, y, QpStatus.MAX_ITER, it, t_start)

    def _finish(self, x, z, y, status, it, t_start):
        s = self.scaling
        xu = s.D * x
        yu = s.E * y / s.c
        prim, dual, _ = kkt_residuals(self.prob, xu, yu)
        return QpSolution(
            x=xu, y=yu, status=status, iterations=it, primal_residual=prim, dual_residual=dual,
            objective=self.prob.objective(xu), solve_time=time.perf_counter() - t_start,
        )


def solve_qp(prob: QpProblem, settings: QpSettings | None = None, x0=None, y0=None) -> QpSolution:
    return QpSolver(prob, settings).solve(x0=x0, y0=y0)


def _fmt(v: float) -> str:
    return repr(float(v))


def dump_triplets(prob: QpProblem, path) -> None:
    P = sp.triu(prob.P).tocoo()
    A = prob.A.tocoo()
    lines = [f"{prob.n} {prob.m}", f"P {P.nnz}"]
    lines += [f"{i} {j} {_fmt(v)}" for i, j, v in zip(P.row, P.col, P.data)]
    lines.append("q")
    lines += [_fmt(v) for v in prob.q]
    lines.append(f"A {A.nnz}")
    lines += [f"{i} {j} {_fmt(v)}" for i, j, v in zip(A.row, A.col, A.data)]
    lines.append("l")
    lines += [_fmt(v) for v in prob.l]
    lines.append("u")
    lines += [_fmt(v) for v in prob.u]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_triplets(path) -> QpProblem:
    with open(path) as fh:
        tokens = [line.strip() for line in fh if line.strip()]
    n, m = map(int, tokens[0].split())
    pos = 1

    def read_coo(shape):
        nonlocal pos
        nnz = int(tokens[pos].split()[1])
        pos += 1
        rows, cols, vals = [], [], []
        for line in tokens[pos:pos + nnz]:
            i, j, v = line.split()
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(v))
        pos += nnz
        return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsc()

    def read_vec(k):
        nonlocal pos
        pos += 1
        out = np.array([float(t) for t in tokens[pos:pos + k]])
        pos += k
        return out

    P_upper = read_coo((n, n))
    P = P_upper + sp.triu(P_upper, k=1).T
    q = read_vec(n)
    A = read_coo((m, n))
    l = read_vec(m)
    u = read_vec(m)
    return QpProblem(P, q, A, l, u)
