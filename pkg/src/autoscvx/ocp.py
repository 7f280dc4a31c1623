"""Mission configuration, constraint partitioning and the reentry problem instance.

Every buffered constraint row touches a single node, so rows are stored as
``(value, node, d/dx_node, d/du_node)``. Rows are partitioned into buffered
equalities, buffered inequalities and a directly enforced set (dynamics,
initial condition, control magnitude, rates, time steps, horizon and the wide
state box).
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .discretize import PropagationError, ReferenceTrajectory, discretize, propagate_states
from .scaling import PhysicalConstants, make_scales
from .vehicle import (
    ALPHA, DEG, GAMMA, N_STATES, PHI, PSI, R, SIGMA, THETA, V,
    ControlMode, PathLimits, ReentryVehicle, SingularStateError, VehicleParams,
)

STATE_NAMES = ("altitude", "longitude", "latitude", "speed", "flight_path", "heading")
STATE_UNITS = ("m", "deg", "deg", "m/s", "deg", "deg")
TERMINAL_KINDS = ("equal", "interval", "free")


class ConfigError(ValueError):
    pass


class GuessError(RuntimeError):
    pass


@dataclass(frozen=True)
class TerminalSpec:
    kind: str = "free"
    value: float | None = None
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in TERMINAL_KINDS:
            raise ConfigError(f"terminal kind must be one of {TERMINAL_KINDS}, got {self.kind!r}")
        if self.kind == "equal" and self.value is None:
            raise ConfigError("equality terminal spec needs a value")
        if self.kind == "interval":
            if self.lo is None or self.hi is None:
                raise ConfigError("interval terminal spec needs lo and hi")
            if self.lo > self.hi:
                raise ConfigError(f"terminal interval has lo > hi ({self.lo} > {self.hi})")

    @classmethod
    def parse(cls, raw) -> "TerminalSpec":
        if raw is None or raw == "free":
            return cls("free")
        if isinstance(raw, (int, float)):
            return cls("equal", value=float(raw))
        if isinstance(raw, dict):
            if "equal" in raw:
                return cls("equal", value=float(raw["equal"]))
            if "interval" in raw:
                lo, hi = raw["interval"]
                return cls("interval", lo=float(lo), hi=float(hi))
        if isinstance(raw, (list, tuple)) and len(raw) == 2:
            return cls("interval", lo=float(raw[0]), hi=float(raw[1]))
        raise ConfigError(f"cannot parse terminal spec {raw!r}")

    def to_raw(self):
        if self.kind == "free":
            return "free"
        if self.kind == "equal":
            return {"equal": self.value}
        return {"interval": [self.lo, self.hi]}


@dataclass(frozen=True)
class Tolerances:
    """Optimality and feasibility tolerances in mission units."""

    cost_mps: float = 5.0
    opt_altitude_m: float = 5000.0
    opt_angle_deg: float = 1.0
    opt_speed_mps: float = 30.0
    opt_attitude_deg: float = 5.0
    feas_altitude_m: float = 2000.0
    feas_angle_deg: float = 2.0
    feas_speed_mps: float = 30.0
    feas_attitude_deg: float = 6.0
    feas_path: float = 0.01
    feas_nfz_deg: float = 0.1
    feas_alpha_deg: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"tolerance {f.name} must be positive")


@dataclass(frozen=True)
class MissionConfig:
    """Everything that defines one reentry instance.

    Altitudes are in metres, speeds in m/s, angles in degrees and times in
    seconds; conversion to internal units happens in :func:`build_reentry_problem`.
    """

    name: str = "mission"
    mode: ControlMode = ControlMode.BANK_ONLY
    nodes: int = 40
    initial: tuple = (100e3, 0.0, 0.0, 7450.0, -0.5, 0.0)
    initial_bank_deg: float = 0.0
    terminal: tuple = (
        TerminalSpec("equal", 15e3), TerminalSpec("equal", 12.0), TerminalSpec("equal", 70.0),
        TerminalSpec("free"), TerminalSpec("equal", -10.0), TerminalSpec("equal", 90.0),
    )
    tf_guess_s: float = 1700.0
    tf_min_s: float = 500.0
    tf_max_s: float = 4000.0
    step_min_s: float = 5.0
    step_max_s: float = 120.0
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    limits: PathLimits = field(default_factory=PathLimits)
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    tolerances: Tolerances = field(default_factory=Tolerances)
    # Extra buffered state bounds {state name: (lo, hi)} in mission units
    state_bounds: tuple = ()
    solver: dict = field(default_factory=dict)
    ptr: dict = field(default_factory=dict)
    dispersion: dict | None = None
    source_text: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", ControlMode(self.mode))
        if self.nodes < 2:
            raise ConfigError("need at least two nodes")
        if len(self.initial) != N_STATES or len(self.terminal) != N_STATES:
            raise ConfigError("initial and terminal specs need six entries")
        if not self.tf_min_s < self.tf_max_s:
            raise ConfigError(f"tf_min ({self.tf_min_s}) must be below tf_max ({self.tf_max_s})")
        if not 0 < self.step_min_s < self.step_max_s:
            raise ConfigError("need 0 < step_min < step_max")
        if not self.tf_guess_s > 0:
            raise ConfigError("tf_guess must be positive")
        if not math.isfinite(sum(self.initial)):
            raise ConfigError("initial state must be finite")
        if self.initial[3] <= 0:
            raise ConfigError("initial speed must be positive")
        for name, _ in self.state_bounds:
            if name not in STATE_NAMES:
                raise ConfigError(f"unknown state {name!r} in state_bounds")

    def with_updates(self, **changes) -> "MissionConfig":
        return replace(self, **changes)

    def with_initial(self, **by_name) -> "MissionConfig":
        init = list(self.initial)
        for key, val in by_name.items():
            init[STATE_NAMES.index(key)] = float(val)
        return replace(self, initial=tuple(init))


# --------------------------------------------------------------------- YAML I/O
_VEHICLE_KEYS = {
    "mass_kg": "mass", "reference_area_m2": "S_ref",
    "K_L1": "K_L1", "K_L2": "K_L2", "K_L3": "K_L3", "K_D1": "K_D1", "K_D2": "K_D2", "K_D3": "K_D3",
    "K_alpha1_deg": "K_alpha1", "K_alpha2": "K_alpha2", "V_lim_mps": "V_lim",
}
_ANGLE_LIMIT_KEYS = {
    "bank_max_deg": "sigma_max", "bank_rate_max_dps": "sigma_dot_max",
    "alpha_rate_max_dps": "alpha_dot_max", "alpha_min_deg": "alpha_floor",
    "alpha_max_deg": "alpha_ceiling", "alpha_margin_deg": "alpha_slack",
}
_CONST_KEYS = {
    "g_mps2": "g_earth", "radius_m": "R_earth", "rotation_rate_rps": "omega_earth",
    "density_sl_kgm3": "rho_sl", "scale_height_m": "H_scale",
}


def _take(section: dict, allowed, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    return section


def config_from_dict(raw: dict, source_text: str | None = None) -> MissionConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = {
        "name", "mode", "nodes", "initial", "terminal", "time", "limits", "vehicle",
        "constants", "tolerances", "state_bounds", "solver", "ptr", "dispersion",
    }
    _take(raw, top, "config")
    base = MissionConfig()
    kw = {"source_text": source_text}
    kw["name"] = str(raw.get("name", base.name))
    try:
        kw["mode"] = ControlMode(raw.get("mode", base.mode.value))
    except ValueError as err:
        raise ConfigError(str(err)) from err
    kw["nodes"] = int(raw.get("nodes", base.nodes))

    init = dict(raw.get("initial", {}))
    bank0 = init.pop("bank_deg", base.initial_bank_deg)
    _take(init, STATE_NAMES, "initial")
    kw["initial"] = tuple(float(init.get(n, d)) for n, d in zip(STATE_NAMES, base.initial))
    kw["initial_bank_deg"] = float(bank0)

    if "terminal" in raw:
        term = _take(dict(raw["terminal"]), STATE_NAMES, "terminal")
        kw["terminal"] = tuple(TerminalSpec.parse(term.get(n, "free")) for n in STATE_NAMES)

    t = _take(dict(raw.get("time", {})), {"final_guess_s", "final_min_s", "final_max_s", "step_min_s", "step_max_s"}, "time")
    kw["tf_guess_s"] = float(t.get("final_guess_s", base.tf_guess_s))
    kw["tf_min_s"] = float(t.get("final_min_s", base.tf_min_s))
    kw["tf_max_s"] = float(t.get("final_max_s", base.tf_max_s))
    kw["step_min_s"] = float(t.get("step_min_s", base.step_min_s))
    kw["step_max_s"] = float(t.get("step_max_s", base.step_max_s))

    consts = _take(dict(raw.get("constants", {})), _CONST_KEYS, "constants")
    kw["constants"] = PhysicalConstants(**{_CONST_KEYS[k]: float(v) for k, v in consts.items()})
    g0 = kw["constants"].g_earth

    veh = _take(dict(raw.get("vehicle", {})), _VEHICLE_KEYS, "vehicle")
    vkw = {_VEHICLE_KEYS[k]: float(v) for k, v in veh.items()}
    lim = _take(dict(raw.get("limits", {})), set(_ANGLE_LIMIT_KEYS) | {
        "heat_rate_max_wm2", "dynamic_pressure_max_pa", "load_max_g", "heat_coefficient", "no_fly_zones_deg",
    }, "limits")
    for key, attr in _ANGLE_LIMIT_KEYS.items():
        if key in lim:
            vkw[attr] = float(lim[key]) * DEG
    try:
        kw["vehicle"] = VehicleParams(**vkw)
        plim = {}
        if "heat_rate_max_wm2" in lim:
            plim["Q_dot_max"] = float(lim["heat_rate_max_wm2"])
        if "dynamic_pressure_max_pa" in lim:
            plim["q_dyn_max"] = float(lim["dynamic_pressure_max_pa"])
        plim["n_g_max"] = float(lim.get("load_max_g", 2.5)) * g0
        if "heat_coefficient" in lim:
            plim["k_Q"] = float(lim["heat_coefficient"])
        zones = lim.get("no_fly_zones_deg") or []
        plim["nfz"] = tuple(tuple(float(c) * DEG for c in z) for z in zones)
        kw["limits"] = PathLimits(**plim)
    except ValueError as err:
        raise ConfigError(str(err)) from err

    tol = dict(raw.get("tolerances", {}))
    _take(tol, {f.name for f in fields(Tolerances)}, "tolerances")
    kw["tolerances"] = Tolerances(**{k: float(v) for k, v in tol.items()})

    bounds = raw.get("state_bounds") or {}
    kw["state_bounds"] = tuple((k, (float(v[0]), float(v[1]))) for k, v in bounds.items())
    for name, (lo, hi) in kw["state_bounds"]:
        if lo > hi:
            raise ConfigError(f"state bound for {name} has lo > hi")
    kw["solver"] = dict(raw.get("solver", {}))
    kw["ptr"] = dict(raw.get("ptr", {}))
    kw["dispersion"] = dict(raw["dispersion"]) if raw.get("dispersion") else None
    return MissionConfig(**kw)


def load_config(path) -> MissionConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"invalid YAML in {path}: {err}") from err
    return config_from_dict(raw, source_text=text)


# ------------------------------------------------------------ partition types
@dataclass(frozen=True)
class RowBlock:
    name: str
    target: str  # "eq", "ineq" or "direct"
    size: int

    def __post_init__(self):
        if self.target not in ("eq", "ineq", "direct"):
            raise ValueError(f"bad partition target {self.target!r}")


@dataclass(frozen=True)
class ConstraintPartition:
    """Disjoint assignment of every scalar constraint row to the buffered equality,
    buffered inequality or directly enforced set.

    ``eps_*`` are the target residuals used by the weight update and
    ``tol_*`` the feasibility tolerances, both per buffered row.
    """

    blocks: tuple
    eps_h: np.ndarray
    eps_g: np.ndarray
    tol_h: np.ndarray
    tol_g: np.ndarray
    labels_h: tuple
    labels_g: tuple

    def __post_init__(self):
        if self.eps_h.shape != (self.n_eq,) or self.eps_g.shape != (self.n_ineq,):
            raise ValueError("target residual arrays do not match the buffered row counts")
        if np.any(self.eps_h <= 0) or np.any(self.eps_g <= 0):
            raise ValueError("every buffered row needs a positive target residual")

    @property
    def n_rows(self) -> int:
        return sum(b.size for b in self.blocks)

    def _count(self, target):
        return sum(b.size for b in self.blocks if b.target == target)

    @property
    def n_eq(self) -> int:
        return self._count("eq")

    @property
    def n_ineq(self) -> int:
        return self._count("ineq")

    @property
    def n_direct(self) -> int:
        return self._count("direct")

    def index(self, target: str) -> np.ndarray:
        """Global row indices belonging to ``target``."""
        out, start = [], 0
        for b in self.blocks:
            if b.target == target:
                out.append(np.arange(start, start + b.size))
            start += b.size
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def masks(self):
        n = self.n_rows
        result = {}
        for t in ("eq", "ineq", "direct"):
            m = np.zeros(n, dtype=bool)
            m[self.index(t)] = True
            result[t] = m
        return result


@dataclass
class BufferedRows:
    """Node-local buffered rows with gradients w.r.t. that node's x and u."""

    eq: np.ndarray
    eq_node: np.ndarray
    eq_dx: np.ndarray
    eq_du: np.ndarray
    ineq: np.ndarray
    ineq_node: np.ndarray
    ineq_dx: np.ndarray
    ineq_du: np.ndarray


@dataclass
class NonconvexResiduals:
    eq: np.ndarray
    ineq: np.ndarray
    dynamics_defect: np.ndarray  # (N-1, 6)
    direct: dict  # name -> max violation of directly enforced rows

    def buffered_violation(self) -> np.ndarray:
        """Row-wise violation: ``|eq|`` then ``max(ineq, 0)``."""
        return np.concatenate([np.abs(self.eq), np.maximum(self.ineq, 0.0)])

    def max_violation(self) -> float:
        return float(np.max(self.buffered_violation(), initial=0.0))


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable reentry instance in internal units."""

    config: MissionConfig
    model: ReentryVehicle
    partition: ConstraintPartition
    x0: np.ndarray
    sigma0: float
    N: int
    terminal_eq: tuple  # ((state index, target), ...)
    terminal_int: tuple  # ((state index, lo, hi), ...)
    state_bounds: tuple  # ((state index, lo, hi), ...) buffered
    u_lo: np.ndarray
    u_hi: np.ndarray
    rate_max: np.ndarray
    tf_bounds: tuple
    T_bounds: tuple
    x_box_lo: np.ndarray
    x_box_hi: np.ndarray
    opt_tol_x: np.ndarray  # per-state optimality tolerance on |dx|
    cost_tol: float  # internal velocity units
    cost_index: int = V

    @property
    def n_x(self) -> int:
        return N_STATES

    @property
    def n_u(self) -> int:
        return self.model.n_u

    @property
    def n_z(self) -> int:
        return (self.n_x + self.n_u) * self.N + (self.N - 1)

    @property
    def n_eq(self) -> int:
        return self.partition.n_eq

    @property
    def n_ineq(self) -> int:
        return self.partition.n_ineq

    def cost(self, ref: ReferenceTrajectory) -> float:
        return float(ref.x[-1, self.cost_index])

    def cost_mps(self, ref: ReferenceTrajectory) -> float:
        return self.cost(ref) * self.model.scales.velocity_scale

    def buffered_rows(self, x, u) -> BufferedRows:
        """Exact buffered row values and gradients at node states/controls."""
        N, nu = self.N, self.n_u
        last = N - 1
        eq_vals, eq_dx = [], []
        for i, target in self.terminal_eq:
            eq_vals.append(x[last, i] - target)
            e = np.zeros(N_STATES)
            e[i] = 1.0
            eq_dx.append(e)
        n_eq = len(eq_vals)

        ineq_vals, ineq_node, ineq_dx, ineq_du = [], [], [], []

        def add_state_rows(node, i, lo, hi):
            e = np.zeros(N_STATES)
            e[i] = 1.0
            ineq_vals.extend([lo - x[node, i], x[node, i] - hi])
            ineq_node.extend([node, node])
            ineq_dx.extend([-e, e])
            ineq_du.extend([np.zeros(nu), np.zeros(nu)])

        for i, lo, hi in self.terminal_int:
            add_state_rows(last, i, lo, hi)
        for i, lo, hi in self.state_bounds:
            for k in range(1, N):
                add_state_rows(k, i, lo, hi)

        pv, pgx, pgu = self.model.path_constraints_with_grad(x, u)
        n_path = pv.shape[1]
        vals = [np.concatenate([np.asarray(ineq_vals, dtype=float).reshape(-1), pv.reshape(-1)])]
        nodes = [np.asarray(ineq_node, dtype=int).reshape(-1), np.repeat(np.arange(N), n_path)]
        gxs = [np.asarray(ineq_dx, dtype=float).reshape(-1, N_STATES), pgx.reshape(-1, N_STATES)]
        gus = [np.asarray(ineq_du, dtype=float).reshape(-1, nu), pgu.reshape(-1, nu)]
        if self.model.mode is ControlMode.BANK_ALPHA:
            av, agx, agu = self.model.alpha_constraints(x, u)
            vals.append(av.reshape(-1))
            nodes.append(np.repeat(np.arange(N), 2))
            gxs.append(agx.reshape(-1, N_STATES))
            gus.append(agu.reshape(-1, nu))
        return BufferedRows(
            eq=np.asarray(eq_vals, dtype=float),
            eq_node=np.full(n_eq, last, dtype=int),
            eq_dx=np.asarray(eq_dx, dtype=float).reshape(n_eq, N_STATES),
            eq_du=np.zeros((n_eq, nu)),
            ineq=np.concatenate(vals),
            ineq_node=np.concatenate(nodes),
            ineq_dx=np.concatenate(gxs),
            ineq_du=np.concatenate(gus),
        )

    def normalized_violation(self, res: NonconvexResiduals) -> np.ndarray:
        tol = np.concatenate([self.partition.tol_h, self.partition.tol_g])
        return res.buffered_violation() / tol


def _state_to_internal(values, scales):
    alt, th, ph, v, ga, ps = values
    return np.array([
        1.0 + alt / scales.length_scale, th * DEG, ph * DEG, v / scales.velocity_scale, ga * DEG, ps * DEG,
    ])


def _state_scale(i, scales):
    """Factor converting mission units of state ``i`` to internal units."""
    if i == R:
        return 1.0 / scales.length_scale
    if i == V:
        return 1.0 / scales.velocity_scale
    return DEG


def nfz_tolerance(radius: float, tol_angle: float) -> float:
    """Residual of the quadratic zone row when the vehicle sits ``tol_angle`` inside the rim."""
    return radius**2 - (radius - tol_angle) ** 2


def build_reentry_problem(cfg: MissionConfig) -> ProblemSpec:
    model = ReentryVehicle(cfg.vehicle, cfg.limits, cfg.mode, cfg.constants)
    sc = model.scales
    tol = cfg.tolerances
    N = cfg.nodes
    x0 = _state_to_internal(cfg.initial, sc)
    if x0[R] <= 1.0:
        raise ConfigError("initial altitude must be positive")

    feas_state = np.array([
        tol.feas_altitude_m / sc.length_scale, tol.feas_angle_deg * DEG, tol.feas_angle_deg * DEG,
        tol.feas_speed_mps / sc.velocity_scale, tol.feas_attitude_deg * DEG, tol.feas_attitude_deg * DEG,
    ])
    terminal_eq, terminal_int = [], []
    for i, spec in enumerate(cfg.terminal):
        f = _state_scale(i, sc)
        offset = 1.0 if i == R else 0.0
        if spec.kind == "equal":
            terminal_eq.append((i, offset + spec.value * f))
        elif spec.kind == "interval":
            terminal_int.append((i, offset + spec.lo * f, offset + spec.hi * f))
    state_bounds = []
    for name, (lo, hi) in cfg.state_bounds:
        i = STATE_NAMES.index(name)
        f = _state_scale(i, sc)
        offset = 1.0 if i == R else 0.0
        state_bounds.append((i, offset + lo * f, offset + hi * f))

    blocks = [
        RowBlock("initial_state", "direct", N_STATES),
        RowBlock("initial_bank", "direct", 1),
        RowBlock("dynamics", "direct", N_STATES * (N - 1)),
        RowBlock("control_box", "direct", model.n_u * N),
        RowBlock("control_rate", "direct", model.n_u * (N - 1)),
        RowBlock("time_step", "direct", N - 1),
        RowBlock("time_horizon", "direct", 1),
        RowBlock("state_box", "direct", 4 * (N - 1)),
        RowBlock("terminal_equality", "eq", len(terminal_eq)),
        RowBlock("terminal_interval", "ineq", 2 * len(terminal_int)),
        RowBlock("state_bounds", "ineq", 2 * len(state_bounds) * (N - 1)),
        RowBlock("path", "ineq", 3 * N),
        RowBlock("no_fly_zone", "ineq", model.n_nfz * N),
    ]
    if cfg.mode is ControlMode.BANK_ALPHA:
        blocks.append(RowBlock("alpha_corridor", "ineq", 2 * N))

    tol_h = np.array([feas_state[i] for i, _ in terminal_eq])
    labels_h = tuple(f"terminal_{STATE_NAMES[i]}" for i, _ in terminal_eq)
    tol_g, labels_g = [], []
    for i, _, _ in terminal_int:
        tol_g += [feas_state[i]] * 2
        labels_g += [f"terminal_{STATE_NAMES[i]}_lo", f"terminal_{STATE_NAMES[i]}_hi"]
    for i, _, _ in state_bounds:
        for k in range(1, N):
            tol_g += [feas_state[i]] * 2
            labels_g += [f"bound_{STATE_NAMES[i]}_lo@{k}", f"bound_{STATE_NAMES[i]}_hi@{k}"]
    nfz_tol = [nfz_tolerance(z[2], tol.feas_nfz_deg * DEG) for z in model.nfz]
    path_names = ["heat_rate", "dynamic_pressure", "normal_load"] + [f"nfz{j + 1}" for j in range(model.n_nfz)]
    for k in range(N):
        tol_g += [tol.feas_path] * 3 + nfz_tol
        labels_g += [f"{name}@{k}" for name in path_names]
    if cfg.mode is ControlMode.BANK_ALPHA:
        for k in range(N):
            tol_g += [tol.feas_alpha_deg * DEG] * 2
            labels_g += [f"alpha_hi@{k}", f"alpha_lo@{k}"]
    tol_g = np.array(tol_g, dtype=float)
    partition = ConstraintPartition(
        blocks=tuple(blocks),
        eps_h=tol_h.copy(), eps_g=tol_g.copy(), tol_h=tol_h, tol_g=tol_g,
        labels_h=labels_h, labels_g=tuple(labels_g),
    )

    p = cfg.vehicle
    if cfg.mode is ControlMode.BANK_ONLY:
        u_lo, u_hi = np.array([-p.sigma_max]), np.array([p.sigma_max])
        rate = np.array([p.sigma_dot_max])
    else:
        u_lo = np.array([-p.sigma_max, p.alpha_floor])
        u_hi = np.array([p.sigma_max, p.alpha_ceiling])
        rate = np.array([p.sigma_dot_max, p.alpha_dot_max])
    ts = sc.time_scale
    opt_tol = np.array([
        tol.opt_altitude_m / sc.length_scale, tol.opt_angle_deg * DEG, tol.opt_angle_deg * DEG,
        tol.opt_speed_mps / sc.velocity_scale, tol.opt_attitude_deg * DEG, tol.opt_attitude_deg * DEG,
    ])
    box_lo = np.array([1.0, -np.inf, -85.0 * DEG, 1e-3, -85.0 * DEG, -np.inf])
    box_hi = np.array([1.0 + 200e3 / sc.length_scale, np.inf, 85.0 * DEG, 1.5, 85.0 * DEG, np.inf])
    return ProblemSpec(
        config=cfg, model=model, partition=partition, x0=x0, sigma0=cfg.initial_bank_deg * DEG, N=N,
        terminal_eq=tuple(terminal_eq), terminal_int=tuple(terminal_int), state_bounds=tuple(state_bounds),
        u_lo=u_lo, u_hi=u_hi, rate_max=rate * ts,
        tf_bounds=(cfg.tf_min_s / ts, cfg.tf_max_s / ts), T_bounds=(cfg.step_min_s / ts, cfg.step_max_s / ts),
        x_box_lo=box_lo, x_box_hi=box_hi, opt_tol_x=opt_tol, cost_tol=tol.cost_mps / sc.velocity_scale,
    )


def evaluate_nonconvex_residuals(spec: ProblemSpec, ref: ReferenceTrajectory, disc=None) -> NonconvexResiduals:
    """Exact (unlinearized) residuals of every constraint family at ``ref``."""
    if ref.N != spec.N or ref.u.shape[1] != spec.n_u:
        raise ValueError("reference does not match the problem dimensions")
    if disc is None:
        disc = discretize(spec.model, ref)
    rows = spec.buffered_rows(ref.x, ref.u)
    defect = ref.x[1:] - disc.x_prop
    u = ref.u
    rate = np.abs(np.diff(u, axis=0)) / ref.T[:, None] - spec.rate_max
    tf = ref.T.sum()
    lo_T, hi_T = spec.T_bounds
    direct = {
        "dynamics": float(np.max(np.abs(defect), initial=0.0)),
        "initial_state": float(np.max(np.abs(ref.x[0] - spec.x0))),
        "initial_bank": abs(float(ref.u[0, SIGMA] - spec.sigma0)),
        "control_box": float(max(np.max(spec.u_lo - u), np.max(u - spec.u_hi), 0.0)),
        "control_rate": float(max(np.max(rate, initial=0.0), 0.0)),
        "time_step": float(max(np.max(lo_T - ref.T), np.max(ref.T - hi_T), 0.0)),
        "time_horizon": float(max(spec.tf_bounds[0] - tf, tf - spec.tf_bounds[1], 0.0)),
        "state_box": float(max(
            np.max(np.nan_to_num(spec.x_box_lo - ref.x, neginf=0.0)),
            np.max(np.nan_to_num(ref.x - spec.x_box_hi, neginf=0.0)), 0.0,
        )),
    }
    return NonconvexResiduals(eq=rows.eq, ineq=rows.ineq, dynamics_defect=defect, direct=direct)


def initial_guess(cfg_or_spec, fixed_point_iters: int = 4) -> ReferenceTrajectory:
    """Propagate the initial bank angle from the initial state over the guessed horizon."""
    spec = cfg_or_spec if isinstance(cfg_or_spec, ProblemSpec) else build_reentry_problem(cfg_or_spec)
    model, N = spec.model, spec.N
    T = np.full(N - 1, spec.config.tf_guess_s / model.scales.time_scale / (N - 1))
    x = np.zeros((N, N_STATES))
    u = np.zeros((N, spec.n_u))
    x[0] = spec.x0
    u[:, SIGMA] = spec.sigma0
    bank_alpha = model.mode is ControlMode.BANK_ALPHA
    try:
        if bank_alpha:
            u[0, ALPHA] = model.alpha_profile(x[0, V])
        for k in range(N - 1):
            if bank_alpha:
                u[k + 1, ALPHA] = u[k, ALPHA]
                for _ in range(fixed_point_iters):
                    xn = propagate_states(model, x[k], u[k], u[k + 1], T[k:k + 1])[0]
                    u[k + 1, ALPHA] = model.alpha_profile(xn[V])
            x[k + 1] = propagate_states(model, x[k], u[k], u[k + 1], T[k:k + 1])[0]
    except (PropagationError, SingularStateError) as err:
        raise GuessError(f"initial guess propagation failed: {err}") from err
    if np.any(x[:, R] <= 1.0):
        raise GuessError("initial guess reaches the surface before the guessed horizon")
    return ReferenceTrajectory(x=x, u=u, T=T)


def config_to_dict(cfg: MissionConfig) -> dict:
    """Inverse of :func:`config_from_dict` (up to float formatting)."""
    g0 = cfg.constants.g_earth
    p = cfg.vehicle
    out = {
        "name": cfg.name,
        "mode": cfg.mode.value,
        "nodes": cfg.nodes,
        "initial": dict(zip(STATE_NAMES, cfg.initial)) | {"bank_deg": cfg.initial_bank_deg},
        "terminal": {n: t.to_raw() for n, t in zip(STATE_NAMES, cfg.terminal)},
        "time": {
            "final_guess_s": cfg.tf_guess_s, "final_min_s": cfg.tf_min_s, "final_max_s": cfg.tf_max_s,
            "step_min_s": cfg.step_min_s, "step_max_s": cfg.step_max_s,
        },
        "limits": {key: getattr(p, attr) / DEG for key, attr in _ANGLE_LIMIT_KEYS.items()} | {
            "heat_rate_max_wm2": cfg.limits.Q_dot_max,
            "dynamic_pressure_max_pa": cfg.limits.q_dyn_max,
            "load_max_g": cfg.limits.n_g_max / g0,
            "heat_coefficient": cfg.limits.k_Q,
            "no_fly_zones_deg": [[c / DEG for c in z] for z in cfg.limits.nfz],
        },
        "vehicle": {key: getattr(p, attr) for key, attr in _VEHICLE_KEYS.items()},
        "constants": {key: getattr(cfg.constants, attr) for key, attr in _CONST_KEYS.items()},
        "tolerances": {f.name: getattr(cfg.tolerances, f.name) for f in fields(Tolerances)},
        "state_bounds": {k: list(v) for k, v in cfg.state_bounds},
        "solver": copy.deepcopy(cfg.solver),
        "ptr": copy.deepcopy(cfg.ptr),
    }
    if cfg.dispersion:
        out["dispersion"] = copy.deepcopy(cfg.dispersion)
    return out
