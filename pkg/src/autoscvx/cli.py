"""Command-line front end: ``autoscvx solve|compare|disperse|validate``.

Each run writes into ``--out`` or, if omitted, a fresh directory under
``$AUTOSCVX_OUTPUT`` (default ``./runs``). Failures print a JSON error object
on stderr and exit with a nonzero code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .discretize import PropagationError
from .mission import (
    DispersionSpec, IterationWriter, MethodSpec, jsonable, RunManifest, format_table, load_report, make_settings,
    report_payload, run_batch, solve_config, summarize, validation_payload, write_dense_validation, write_json,
    write_records, write_summary, write_trajectory,
)
from .ocp import ConfigError, GuessError, build_reentry_problem, load_config
from .vehicle import SingularStateError

EXIT_CONFIG = 2
EXIT_SOLVE = 3
EXIT_VALIDATION = 4

log = logging.getLogger("autoscvx")


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG, kind="config_error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _load(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as err:
        raise CliError(f"config file not found: {args.config}") from err
    if getattr(args, "nodes", None):
        cfg = cfg.with_updates(nodes=args.nodes)
    return cfg


def _methods(args, cfg) -> list[MethodSpec]:
    out = [MethodSpec.parse("auto")]
    weights = cfg.ptr.get("weights", []) if args.weights is None else args.weights
    out += [MethodSpec.parse(f"ptr:{w}") for w in weights]
    if not args.no_hand_tuned and cfg.ptr.get("hand_tuned"):
        out.append(MethodSpec.parse("ptr:hand"))
    return out


def _progress(quiet):
    done = [0]
    t0 = time.perf_counter()

    def report(rec, total):
        done[0] += 1
        if not quiet:
            print(f"[{done[0]}/{total}] {rec.method} case {rec.case}: {rec.status} "
                  f"({rec.iterations} it, {rec.cost_mps:.1f} m/s) {time.perf_counter() - t0:.0f}s",
                  file=sys.stderr, flush=True)

    return report


# ---------------------------------------------------------------- commands
def cmd_solve(args) -> int:
    cfg = _load(args)
    if args.method == "auto":
        method = MethodSpec.parse("auto")
    elif args.weight is not None:
        method = MethodSpec.parse(f"ptr:{args.weight}")
    else:
        method = MethodSpec.parse("ptr:hand")
    settings = make_settings(cfg, method, args.max_iter)
    man = RunManifest.start("solve", args.config, args.out, argv=sys.argv[1:])
    out = Path(man.output_dir)
    spec = build_reentry_problem(cfg)
    writer = IterationWriter(out, spec)
    try:
        _, report = solve_config(cfg, method, args.max_iter, callback=writer)
    finally:
        writer.close()
    overrides = {"nodes": args.nodes} if args.nodes else {}
    payload = report_payload(spec, report, method, settings, cfg, overrides=overrides)
    write_json(out / "report.json", payload)
    if report.trajectory is not None:
        write_trajectory(out / "trajectory.csv", spec, report.trajectory)
        if report.validation is not None and report.validation.error is None:
            write_dense_validation(out / "validation.csv", spec, report.trajectory, settings.substeps)
    man.finish()
    print(json.dumps({
        "status": report.status.value, "iterations": report.n_iterations, "cost_mps": round(report.cost, 3),
        "final_time_s": round(payload["final_time_s"], 3) if payload["final_time_s"] else None,
        "output_dir": str(out),
    }))
    return 0 if report.converged else EXIT_SOLVE if report.failure else 1


def cmd_compare(args) -> int:
    cfg = _load(args)
    methods = _methods(args, cfg)
    if args.cases > 0:
        disp = DispersionSpec.from_config(cfg, "random", args.cases, args.seed, omit_nfz=False)
        cases = disp.cases()
    else:
        cases = [{}]
    man = RunManifest.start("compare", args.config, args.out, seed=args.seed, argv=sys.argv[1:])
    records = run_batch(cfg, cases, methods, args.workers, args.max_iter, progress=_progress(args.quiet))
    out = Path(man.output_dir)
    write_records(out / "cases.csv", records)
    summaries = summarize(records)
    write_summary(out / "summary.json", summaries)
    man.finish()
    print(format_table(summaries))
    return 0


def cmd_disperse(args) -> int:
    cfg = _load(args)
    grid = "fine" if args.fine else args.grid
    omit = None if args.keep_nfz is None else not args.keep_nfz
    disp = DispersionSpec.from_config(cfg, grid, args.cases, args.seed, omit_nfz=omit)
    man = RunManifest.start("disperse", args.config, args.out, seed=disp.seed, argv=sys.argv[1:])
    method = MethodSpec.parse(args.method)
    t0 = time.perf_counter()
    records = run_batch(cfg, disp.cases(), [method], args.workers, args.max_iter, disp.omit_nfz,
                        progress=_progress(args.quiet))
    out = Path(man.output_dir)
    write_records(out / "cases.csv", records)
    summaries = summarize(records)
    write_summary(out / "summary.json", summaries)
    write_json(out / "dispersion.json", {
        "grid": disp.grid, "cases": disp.size, "lattice": list(disp.lattice), "seed": disp.seed,
        "ranges": {k: list(v) for k, v in disp.ranges.items()}, "omit_no_fly_zones": disp.omit_nfz,
        "wall_time_s": time.perf_counter() - t0, "workers": args.workers,
    })
    man.finish()
    print(format_table(summaries))
    return 0


def cmd_validate(args) -> int:
    spec, traj, raw = load_report(args.report)
    substeps = raw.get("settings", {}).get("substeps", 30)
    payload = validation_payload(spec, traj, args.defect_tol, substeps)
    if args.csv:
        write_dense_validation(args.csv, spec, traj, substeps)
    summary = {k: v for k, v in payload.items() if k != "node_defects"}
    print(json.dumps(jsonable(summary), indent=2))
    if payload["propagation_error"]:
        raise CliError(payload["propagation_error"], EXIT_VALIDATION, "propagation_failure")
    if args.strict and not (payload["defects_ok"] and payload["terminal_ok"]):
        return EXIT_VALIDATION
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="autoscvx", description="Reentry trajectory optimization runs.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="mission YAML file")
        p.add_argument("--out", help="output directory (default: $AUTOSCVX_OUTPUT/<run id>)")
        p.add_argument("--nodes", type=int, help="override the node count")
        p.add_argument("--max-iter", type=int, help="override the iteration cap")

    p = sub.add_parser("solve", help="single solve with full iteration history")
    common(p)
    p.add_argument("--method", choices=["auto", "ptr"], default="auto")
    p.add_argument("--weight", type=float, help="PTR scalar weight (default: hand-tuned map from the config)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", help="self-tuning solver against fixed-weight runs")
    common(p)
    p.add_argument("--weights", type=float, nargs="*", help="PTR weights (default: ptr.weights from the config)")
    p.add_argument("--no-hand-tuned", action="store_true")
    p.add_argument("--cases", type=int, default=0, help="dispersed cases (0 = nominal only)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("disperse", help="dispersion study over initial state and mass")
    common(p)
    p.add_argument("--grid", choices=["coarse", "random"], default="coarse")
    p.add_argument("--fine", action="store_true", help="run the large fine lattice")
    p.add_argument("--cases", type=int, help="case count for --grid random")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", default="auto", help="auto, ptr:<weight> or ptr:hand")
    p.add_argument("--workers", type=int, default=1)
    nfz = p.add_mutually_exclusive_group()
    nfz.add_argument("--keep-nfz", dest="keep_nfz", action="store_true", default=None)
    nfz.add_argument("--omit-nfz", dest="keep_nfz", action="store_false")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_disperse)

    p = sub.add_parser("validate", help="re-propagate a saved solution and report defects")
    p.add_argument("report", help="report.json written by solve")
    p.add_argument("--defect-tol", type=float, default=1e-6)
    p.add_argument("--csv", help="write the dense single-shoot trace here")
    p.add_argument("--strict", action="store_true", help="nonzero exit if defects or terminal errors fail")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as err:
        code, kind, msg = err.code, err.kind, str(err)
    except ConfigError as err:
        code, kind, msg = EXIT_CONFIG, "config_error", str(err)
    except (GuessError, PropagationError, SingularStateError) as err:
        code, kind, msg = EXIT_SOLVE, "solve_error", str(err)
    except (OSError, json.JSONDecodeError) as err:
        code, kind, msg = EXIT_CONFIG, "io_error", str(err)
    print(json.dumps({"error": kind, "message": msg, "exit_code": code}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
