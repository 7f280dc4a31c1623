"""Batch solves, dispersion studies and plot-ready export of results.

Everything here works in mission units (m, m/s, deg, s). File formats are
described in ``docs/output_formats.md``.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .discretize import ReferenceTrajectory, single_shoot
from .engine import IterationRecord, SolveReport, SolverSettings, _solve, validate_trajectory
from .ocp import STATE_NAMES, ConfigError, MissionConfig, ProblemSpec, build_reentry_problem, config_from_dict
from .vehicle import DEG, R, V, ControlMode

OUTPUT_ENV = "AUTOSCVX_OUTPUT"
DISPERSED = ("altitude", "speed", "flight_path", "mass_kg")
DEFAULT_RANGES = {
    "altitude": (-10_000.0, 10_000.0),
    "speed": (-50.0, 150.0),
    "flight_path": (-0.3, 0.4),
    "mass_kg": (-1000.0, 1000.0),
}
COARSE_LATTICE = (6, 6, 3, 2)
FINE_LATTICE = (5, 41, 3, 2)
TIMING_FIELDS = ("ms_per_iteration", "qp_ms_per_iteration", "wall_time_s", "mean_ms_per_iteration")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


# ------------------------------------------------------------------ methods
@dataclass(frozen=True)
class MethodSpec:
    """One solver configuration in a comparison: ``auto``, ``ptr:<weight>`` or ``ptr:hand``."""

    label: str
    method: str = "auto"
    weight: float | None = None  # None with method "ptr" means the hand-tuned map

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        text = text.strip()
        if text == "auto":
            return cls("auto")
        if text.startswith("ptr"):
            arg = text[4:] if text[3:4] == ":" else ""
            if arg in ("", "hand"):
                return cls("ptr:hand", "ptr", None)
            try:
                w = float(arg)
            except ValueError:
                raise ConfigError(f"bad PTR weight in {text!r}") from None
            if not w > 0:
                raise ConfigError("PTR weight must be positive")
            return cls(f"ptr:{w:g}", "ptr", w)
        raise ConfigError(f"unknown method {text!r} (use auto, ptr:<weight> or ptr:hand)")


def make_settings(cfg: MissionConfig, method: MethodSpec, max_iterations: int | None = None) -> SolverSettings:
    overrides = {"method": method.method, "max_iterations": max_iterations}
    if method.method == "ptr":
        if method.weight is None:
            hand = cfg.ptr.get("hand_tuned")
            if not hand:
                raise ConfigError("config has no ptr.hand_tuned weights")
            overrides["ptr_weight"] = {k: float(v) for k, v in hand.items()}
        else:
            overrides["ptr_weight"] = method.weight
        overrides["ptr_linear"] = float(cfg.ptr.get("linear", 0.0))
        if "linear_mode" in cfg.ptr:
            overrides["ptr_linear_mode"] = cfg.ptr["linear_mode"]
    try:
        return SolverSettings.from_dict(cfg.solver, **overrides)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def solve_config(cfg: MissionConfig, method: MethodSpec, max_iterations=None, callback=None):
    spec = build_reentry_problem(cfg)
    return spec, _solve(spec, None, make_settings(cfg, method, max_iterations), callback)


# --------------------------------------------------------------- dispersion
@dataclass(frozen=True)
class DispersionSpec:
    """Uniform offsets from the nominal mission.

    ``grid`` is ``"coarse"`` or ``"fine"`` (full-factorial lattices with
    ``lattice[i]`` evenly spaced points over range ``i``, ends included) or
    ``"random"`` (``n_cases`` seeded uniform draws).
    """

    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    grid: str = "random"
    n_cases: int = 10
    lattice: tuple = COARSE_LATTICE
    seed: int = 0
    omit_nfz: bool = False

    def __post_init__(self):
        unknown = set(self.ranges) - set(DISPERSED)
        if unknown:
            raise ConfigError(f"cannot disperse {sorted(unknown)}; allowed: {list(DISPERSED)}")
        for name, (lo, hi) in self.ranges.items():
            if not lo <= hi:
                raise ConfigError(f"dispersion range for {name} has lo > hi")
        if self.grid not in ("coarse", "fine", "random"):
            raise ConfigError(f"unknown dispersion grid {self.grid!r}")
        if self.grid != "random" and len(self.lattice) != len(DISPERSED):
            raise ConfigError(f"lattice needs {len(DISPERSED)} counts")
        if self.size < 1:
            raise ConfigError("dispersion needs at least one case")

    @classmethod
    def from_config(cls, cfg: MissionConfig, grid="random", n_cases=None, seed=None, omit_nfz=None):
        raw = dict(cfg.dispersion or {})
        allowed = set(DISPERSED) | {"lattice", "fine_lattice", "batch_size", "seed", "omit_no_fly_zones"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in dispersion")
        ranges = {k: tuple(float(v) for v in raw[k]) for k in DISPERSED if k in raw} or dict(DEFAULT_RANGES)
        lattice = tuple(raw.get("fine_lattice", FINE_LATTICE) if grid == "fine" else raw.get("lattice", COARSE_LATTICE))
        return cls(
            ranges=ranges, grid=grid,
            n_cases=int(n_cases if n_cases is not None else raw.get("batch_size", 10)),
            lattice=tuple(int(n) for n in lattice),
            seed=int(seed if seed is not None else raw.get("seed", 0)),
            omit_nfz=bool(omit_nfz if omit_nfz is not None else raw.get("omit_no_fly_zones", False)),
        )

    @property
    def size(self) -> int:
        return self.n_cases if self.grid == "random" else math.prod(self.lattice)

    def cases(self) -> list[dict]:
        names = [n for n in DISPERSED if n in self.ranges]
        if self.grid == "random":
            rng = np.random.default_rng(self.seed)
            draws = rng.uniform(0.0, 1.0, size=(self.n_cases, len(names)))
            return [
                {n: self.ranges[n][0] + d * (self.ranges[n][1] - self.ranges[n][0]) for n, d in zip(names, row)}
                for row in draws
            ]
        axes = []
        for name, count in zip(DISPERSED, self.lattice):
            lo, hi = self.ranges.get(name, (0.0, 0.0))
            axes.append(np.linspace(lo, hi, count) if count > 1 else np.array([0.5 * (lo + hi)]))
        return [{n: float(v) for n, v in zip(DISPERSED, pt) if n in self.ranges} for pt in itertools.product(*axes)]


def apply_dispersion(cfg: MissionConfig, offsets: dict, omit_nfz=False) -> MissionConfig:
    init = {n: cfg.initial[STATE_NAMES.index(n)] + offsets[n] for n in offsets if n in STATE_NAMES}
    out = cfg.with_initial(**init)
    if "mass_kg" in offsets:
        out = replace(out, vehicle=replace(out.vehicle, mass=out.vehicle.mass + offsets["mass_kg"]))
    if omit_nfz:
        out = replace(out, limits=replace(out.limits, nfz=()))
    return out


# ------------------------------------------------------------ batch records
@dataclass
class CaseRecord:
    case: int
    method: str
    status: str
    iterations: int
    cost_mps: float
    final_time_s: float
    residual: float
    max_node_defect: float
    ms_per_iteration: float
    qp_ms_per_iteration: float
    failure: str = ""
    d_altitude: float = 0.0
    d_speed: float = 0.0
    d_flight_path: float = 0.0
    d_mass_kg: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def case_record(case: int, method: str, spec: ProblemSpec | None, report: SolveReport | None,
                offsets: dict, error: str = "") -> CaseRecord:
    off = {f"d_{k}": float(v) for k, v in offsets.items()}
    if report is None:
        nan = float("nan")
        return CaseRecord(case, method, "error", 0, nan, nan, nan, nan, nan, nan, error, **off)
    its = report.iterations
    v = report.validation
    tf = report.trajectory.t_final * spec.model.scales.time_scale if report.trajectory is not None else float("nan")
    return CaseRecord(
        case=case, method=method, status=report.status.value, iterations=report.n_iterations,
        cost_mps=float(report.cost), final_time_s=float(tf),
        residual=float(its[-1].max_violation) if its else float("nan"),
        max_node_defect=float(v.max_node_defect) if v is not None else float("nan"),
        ms_per_iteration=1e3 * report.mean_iteration_time(), qp_ms_per_iteration=1e3 * report.mean_qp_time(),
        failure=report.failure or "", **off,
    )


def _run_case(task) -> CaseRecord:
    case, cfg, offsets, method, max_iterations, omit_nfz = task
    spec = None
    try:
        spec, report = solve_config(apply_dispersion(cfg, offsets, omit_nfz), method, max_iterations)
    except Exception as err:  # a single bad case must not stop the batch
        return case_record(case, method.label, None, None, offsets, f"{type(err).__name__}: {err}")
    return case_record(case, method.label, spec, report, offsets)


def run_batch(cfg: MissionConfig, cases: list[dict], methods: list[MethodSpec], workers: int = 1,
              max_iterations=None, omit_nfz=False, progress=None) -> list[CaseRecord]:
    """Solve every (method, case) pair; results come back in submission order."""
    tasks = [(i, cfg, off, m, max_iterations, omit_nfz) for m in methods for i, off in enumerate(cases)]
    out = []
    if workers <= 1:
        results = map(_run_case, tasks)
        for rec in results:
            out.append(rec)
            if progress:
                progress(rec, len(tasks))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for rec in pool.map(_run_case, tasks, chunksize=1):
            out.append(rec)
            if progress:
                progress(rec, len(tasks))
    return out


@dataclass
class StatsSummary:
    """Aggregate metrics over a batch.

    Iterations and cost are averaged over converged runs; time per iteration
    and residual over every run that produced iterations.
    """

    method: str
    n_runs: int
    n_converged: int
    convergence_pct: float
    mean_iterations: float
    mean_ms_per_iteration: float
    mean_cost_mps: float
    mean_residual: float

    @classmethod
    def from_records(cls, method: str, records) -> "StatsSummary":
        recs = [r for r in records if r.method == method]
        conv = [r for r in recs if r.converged]
        ran = [r for r in recs if r.iterations > 0]

        def mean(vals):
            vals = list(vals)
            return float(np.mean(vals)) if vals else float("nan")

        return cls(
            method=method, n_runs=len(recs), n_converged=len(conv),
            convergence_pct=100.0 * len(conv) / len(recs) if recs else float("nan"),
            mean_iterations=mean(r.iterations for r in conv),
            mean_ms_per_iteration=mean(r.ms_per_iteration for r in ran),
            mean_cost_mps=mean(r.cost_mps for r in conv),
            mean_residual=mean(r.residual for r in ran),
        )


def summarize(records) -> list[StatsSummary]:
    methods = list(dict.fromkeys(r.method for r in records))
    return [StatsSummary.from_records(m, records) for m in methods]


# ------------------------------------------------------------------- files
def _num(v):
    # repr round-trips floats exactly; csv would do the same via str()
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_records(path, records):
    names = [f.name for f in fields(CaseRecord)]
    write_csv(path, names, ([getattr(r, n) for n in names] for r in records))


def read_records(path) -> list[CaseRecord]:
    types = {f.name: f.type for f in fields(CaseRecord)}
    out = []
    for row in read_csv(path):
        kw = {}
        for k, v in row.items():
            kw[k] = int(v) if types[k] == "int" else v if types[k] == "str" else float(v)
        out.append(CaseRecord(**kw))
    return out


def jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return jsonable(obj.item())
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_summary(path, summaries):
    write_json(path, [asdict(s) for s in summaries])
    names = [f.name for f in fields(StatsSummary)]
    write_csv(Path(path).with_suffix(".csv"), names, ([getattr(s, n) for n in names] for s in summaries))


def format_table(summaries) -> str:
    rows = [
        ("Iterations", "mean_iterations", "{:.1f}"),
        ("ms / iteration", "mean_ms_per_iteration", "{:.1f}"),
        ("Cost [m/s]", "mean_cost_mps", "{:.2f}"),
        ("Residual", "mean_residual", "{:.1e}"),
        ("Converged [%]", "convergence_pct", "{:.0f}"),
    ]
    width = max(12, *(len(s.method) + 2 for s in summaries))
    lines = ["".ljust(16) + "".join(s.method.rjust(width) for s in summaries)]
    for title, attr, fmt in rows:
        cells = []
        for s in summaries:
            v = getattr(s, attr)
            cells.append(("-" if v != v else fmt.format(v)).rjust(width))
        lines.append(title.ljust(16) + "".join(cells))
    return "\n".join(lines)


# ------------------------------------------------------------ run manifest
@dataclass
class RunManifest:
    run_id: str
    kind: str
    config_file: str
    config_sha256: str
    output_dir: str
    seed: int | None = None
    argv: list = field(default_factory=list)
    started: str = ""
    finished: str = ""

    @classmethod
    def start(cls, kind, config_path, out_dir=None, seed=None, argv=None) -> "RunManifest":
        data = Path(config_path).read_bytes()
        sha = hashlib.sha256(data).hexdigest()
        now = datetime.now(timezone.utc)
        run_id = f"{kind}-{now:%Y%m%dT%H%M%S}-{sha[:8]}"
        out = Path(out_dir) if out_dir else output_root() / run_id
        out.mkdir(parents=True, exist_ok=True)
        # byte-identical snapshot of the ingested file
        (out / "config.yaml").write_bytes(data)
        return cls(run_id, kind, str(config_path), sha, str(out), seed, list(argv or []), now.isoformat())

    def finish(self):
        self.finished = datetime.now(timezone.utc).isoformat()
        write_json(Path(self.output_dir) / "manifest.json", asdict(self))


# ------------------------------------------------------ single-solve export
def _state_columns():
    return ["altitude_m", "longitude_deg", "latitude_deg", "speed_mps", "flight_path_deg", "heading_deg"]


def _to_mission(x, scales):
    out = np.degrees(np.asarray(x, dtype=float))
    out[..., R] = (x[..., R] - 1.0) * scales.length_scale
    out[..., V] = x[..., V] * scales.velocity_scale
    return out


def _control_columns(spec):
    return ["bank_deg", "alpha_deg"] if spec.model.mode is ControlMode.BANK_ALPHA else ["bank_deg"]


class IterationWriter:
    """Streams per-iteration rows to disk as the solve runs."""

    columns = [
        "iteration", "cost_mps", "delta_cost_mps", "final_time_s", "max_violation", "max_normalized_violation",
        "max_defect", "max_abs_p", "max_q", "max_w_h", "max_w_g", "qp_status", "qp_iterations", "qp_time_s",
        "wall_time_s", "converged_branch",
    ]

    def __init__(self, out_dir: Path, spec: ProblemSpec):
        self.spec = spec
        self.out_dir = Path(out_dir)
        self._files = []
        self.summary = self._open("iterations.csv", self.columns)
        self.states = self._open("states_history.csv", ["iteration", "node", "time_s"] + _state_columns())
        self.controls = self._open("controls_history.csv", ["iteration", "node", "time_s"] + _control_columns(spec))
        self.rows = self._open("rows_history.csv",
                               ["iteration", "kind", "label", "residual", "buffer", "weight", "dual"])

    def _open(self, name, header):
        fh = open(self.out_dir / name, "w", newline="")
        self._files.append(fh)
        w = csv.writer(fh)
        w.writerow(header)
        return w

    def __call__(self, rec: IterationRecord):
        sc = self.spec.model.scales
        part = self.spec.partition
        tf = float(rec.T.sum()) * sc.time_scale
        self.summary.writerow([_num(v) for v in (
            rec.iteration, rec.cost, rec.delta_cost, tf, rec.max_violation, rec.max_normalized_violation,
            rec.max_defect, np.max(np.abs(rec.eq_buffer), initial=0.0), np.max(rec.ineq_buffer, initial=0.0),
            np.max(rec.w_h, initial=0.0), np.max(rec.w_g, initial=0.0), rec.qp_status, rec.qp_iterations,
            rec.qp_time, rec.wall_time, rec.converged_branch or "",
        )])
        t = np.concatenate([[0.0], np.cumsum(rec.T)]) * sc.time_scale
        xs = _to_mission(rec.x, sc)
        us = np.degrees(rec.u)
        for k in range(self.spec.N):
            self.states.writerow([rec.iteration, k, _num(t[k])] + [_num(v) for v in xs[k]])
            self.controls.writerow([rec.iteration, k, _num(t[k])] + [_num(v) for v in us[k]])
        for kind, labels, res, buf, w, d in (
            ("eq", part.labels_h, rec.eq_residual, rec.eq_buffer, rec.w_h, rec.lam),
            ("ineq", part.labels_g, rec.ineq_residual, rec.ineq_buffer, rec.w_g, rec.mu),
        ):
            for i, lab in enumerate(labels):
                self.rows.writerow([rec.iteration, kind, lab, _num(res[i]), _num(buf[i]), _num(w[i]), _num(d[i])])
        for fh in self._files:
            fh.flush()

    def close(self):
        for fh in self._files:
            fh.close()


def validation_payload(spec: ProblemSpec, traj: ReferenceTrajectory, defect_tol=1e-6, substeps=30) -> dict:
    v = validate_trajectory(spec, traj, substeps)
    path_names = ["heat_rate", "dynamic_pressure", "normal_load"] + [
        f"nfz{j + 1}" for j in range(len(spec.model.limits.nfz))
    ]
    term = {}
    for i, e in v.terminal_error.items():
        scale = spec.model.scales.length_scale if i == R else spec.model.scales.velocity_scale if i == V else 1 / DEG
        term[STATE_NAMES[i]] = e * scale
    return {
        "propagation_error": v.error,
        "max_node_defect": v.max_node_defect,
        "node_defects": v.node_defects,
        "defects_ok": bool(v.max_node_defect <= defect_tol),
        "defect_tolerance": defect_tol,
        "terminal_error": term,
        "terminal_ok": v.terminal_ok,
        "max_intersample_path": dict(zip(path_names, v.max_intersample_path)),
    }


def write_dense_validation(path, spec: ProblemSpec, traj: ReferenceTrajectory, substeps=30):
    dense = single_shoot(spec.model, spec.x0, traj.u, traj.T, substeps=substeps)
    rows = spec.model.path_constraints(dense.x, dense.u)
    names = ["heat_rate", "dynamic_pressure", "normal_load"] + [f"nfz{j + 1}" for j in range(rows.shape[1] - 3)]
    xs = _to_mission(dense.x, spec.model.scales)
    us = np.degrees(dense.u)
    t = dense.t * spec.model.scales.time_scale
    write_csv(path, ["time_s"] + _state_columns() + _control_columns(spec) + names,
              (np.concatenate([[t[i]], xs[i], us[i], rows[i]]) for i in range(len(t))))


def report_payload(spec: ProblemSpec, report: SolveReport, method: MethodSpec, settings: SolverSettings,
                   cfg: MissionConfig, defect_tol=1e-6, overrides=None) -> dict:
    sc = spec.model.scales
    traj = report.trajectory
    out = {
        "method": method.label,
        "status": report.status.value,
        "iterations": report.n_iterations,
        "cost_mps": report.cost,
        "final_time_s": traj.t_final * sc.time_scale if traj is not None else None,
        "failure": report.failure,
        "failed_iteration": report.failed_iteration,
        "wall_time_s": report.wall_time,
        "settings": {k: v for k, v in asdict(settings).items()},
        "config_text": cfg.source_text,
        "overrides": overrides or {},
        "trajectory": None if traj is None else {"x": traj.x, "u": traj.u, "T": traj.T},
    }
    if report.validation is not None and traj is not None:
        out["validation"] = validation_payload(spec, traj, defect_tol, settings.substeps)
    return out


def write_trajectory(path, spec, traj):
    sc = spec.model.scales
    t = traj.times() * sc.time_scale
    xs = _to_mission(traj.x, sc)
    us = np.degrees(traj.u)
    steps = np.append(traj.T * sc.time_scale, np.nan)
    write_csv(path, ["node", "time_s"] + _state_columns() + _control_columns(spec) + ["step_s"],
              ([k, t[k], *xs[k], *us[k], steps[k]] for k in range(traj.N)))


def load_report(path) -> tuple[ProblemSpec, ReferenceTrajectory, dict]:
    raw = json.loads(Path(path).read_text())
    text = raw.get("config_text")
    if text is None:
        snap = Path(path).with_name("config.yaml")
        if not snap.exists():
            raise ConfigError("report has no embedded config and no config.yaml beside it")
        text = snap.read_text()
    cfg = config_from_dict(yaml.safe_load(text), source_text=text)
    if raw.get("overrides"):
        cfg = cfg.with_updates(**raw["overrides"])
    tr = raw.get("trajectory")
    if tr is None:
        raise ConfigError("report has no trajectory")
    traj = ReferenceTrajectory(x=np.array(tr["x"], dtype=float), u=np.array(tr["u"], dtype=float),
                               T=np.array(tr["T"], dtype=float))
    return build_reentry_problem(cfg), traj, raw
