"""Command-line entry point: ``optimize``, ``evaluate``, ``generate``, ``export-map``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Progress goes to standard error; results go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from functools import partial
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, _TYPES, field_names, parse_value
from .evaluation import MetricError, evaluate, export_map
from .geometry import Pose
from .optimizer import OptimizationError, optimize, write_report_csv
from .pointcloud import preprocess_scan
from .storage import FormatError, ScanStore, check_trajectory, read_pose_file, write_pose_file
from .synthetic import SceneParams, SensorParams, SessionParams, generate_scene, offset_session, perturb_trajectory

log = logging.getLogger("ctba")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration; flags override it")
    for name in field_names():
        typ = _TYPES[name]
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar=getattr(typ, "__name__", "VALUE").upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctba", description="Continuous-time LiDAR bundle adjustment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("optimize", help="refine the initial trajectory against the scans")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="ATE / RPE (and inter-session RPE) against ground truth")
    p.add_argument("estimate")
    p.add_argument("ground_truth")
    p.add_argument("--inter", action="store_true", help="also report inter-RPE between the first two sessions")
    p.add_argument("--csv", action="store_true", help="CSV instead of JSON")
    p.add_argument("--no-align", action="store_true", help="skip rigid alignment for ATE")
    p.add_argument("--output", help="write here instead of standard output")

    p = sub.add_parser("generate", help="simulate a synthetic dataset with ground truth")
    p.add_argument("output_dir")
    p.add_argument("--n-scans", type=int, default=50)
    p.add_argument("--sessions", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--range-noise", type=float, default=0.0)
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.add_argument("--n-azimuth", type=int, default=SensorParams.n_azimuth)
    p.add_argument("--n-beams", type=int, default=SensorParams.n_beams)
    p.add_argument("--perturb-trans", type=float, default=0.0, help="initial-pose noise per axis (m)")
    p.add_argument("--perturb-rot", type=float, default=0.0, help="initial-pose noise per axis (deg)")
    p.add_argument("--session-offset", type=float, nargs=2, metavar=("M", "DEG"), default=None,
                   help="shift later sessions of the initial poses by this translation and rotation")

    p = sub.add_parser("export-map", help="write all scans, deskewed, as one text point cloud")
    p.add_argument("scan_dir")
    p.add_argument("poses")
    p.add_argument("output")
    p.add_argument("--subsample-cell", type=float, default=None)
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for name in field_names():
        raw = getattr(args, name)
        if raw is not None:
            overrides[name] = parse_value(name, raw, "--" + name.replace("_", "-"))
    cfg = cfg.updated(**overrides)
    for name in ("scan_dir", "initial_poses", "output_dir"):
        if not getattr(cfg, name):
            raise ConfigError(f"missing required setting {name} (--{name.replace('_', '-')})")
    return cfg


def cmd_optimize(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.output_dir)
    store = ScanStore(
        cfg.scan_dir,
        capacity=cfg.n_buffer,
        preprocess=partial(
            preprocess_scan,
            subsample_cell=cfg.subsample_cell,
            normal_k=cfg.normal_k,
            max_curvature=cfg.max_curvature,
            workers=cfg.threads,
        ),
        preprocess_params=cfg.preprocess_params(),
    )
    init = read_pose_file(cfg.initial_poses)
    check_trajectory(init, store.entries)
    log.info("%d scans, %d knots, %d session(s)", init.n_scans, init.n_knots, len(np.unique(init.session_ids)))

    t0 = time.perf_counter()
    result = optimize(store, init, cfg.optimizer(), cfg.association(), buffer_capacity=cfg.n_buffer)
    wall = time.perf_counter() - t0

    out.mkdir(parents=True, exist_ok=True)
    write_pose_file(out / "poses.txt", result.trajectory)
    write_report_csv(out / "iterations.csv", result.reports)
    cfg.save(out / "config.txt")
    last = result.reports[-1]
    summary = {
        "converged": result.converged,
        "iterations": result.iterations,
        "n_scans": init.n_scans,
        "n_knots": init.n_knots,
        "final_rms": last.rms_after,
        "final_max_update": last.max_update,
        "correspondences": last.n_corr,
        "buffer_hits": store.hits,
        "buffer_misses": store.misses,
        "buffer_evictions": store.evictions,
        "wall_s": round(wall, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    log.info("wrote %s (converged=%s after %d iterations)", out / "poses.txt", result.converged, result.iterations)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = read_pose_file(args.estimate)
    gt = read_pose_file(args.ground_truth)
    report = evaluate(est, gt, inter=args.inter, align=not args.no_align)
    text = report.to_csv() if args.csv else report.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.n_scans < 2 or args.sessions < 1:
        raise UsageError("generate: need --n-scans >= 2 and --sessions >= 1")
    base = SessionParams(n_scans=args.n_scans)
    duration = base.n_scans * base.scan_period
    sessions = tuple(
        SessionParams(
            n_scans=args.n_scans,
            t0=s * (duration + 10.0),
            start=(base.start[0] + 0.5 * s, base.start[1] + 0.3 * s, base.start[2]),
            start_rotvec=(0.0, 0.0, base.start_rotvec[2] + 0.2 * s),
        )
        for s in range(args.sessions)
    )
    params = SceneParams(
        sensor=SensorParams(n_beams=args.n_beams, n_azimuth=args.n_azimuth),
        sessions=sessions,
        range_noise=args.range_noise,
        outlier_fraction=args.outlier_fraction,
    )
    out = Path(args.output_dir)
    scene = generate_scene(params, seed=args.seed, out_dir=out)
    init = scene.gt
    if args.session_offset is not None:
        m, deg = args.session_offset
        g = Pose.from_rotvec([0.0, 0.0, np.deg2rad(deg)], [m, 0.0, 0.0])
        for s in range(1, args.sessions):
            init = offset_session(init, s, g)
    if args.perturb_trans > 0 or args.perturb_rot > 0:
        init = perturb_trajectory(init, args.perturb_trans, args.perturb_rot, seed=args.seed + 1, fixed_first=True)
    write_pose_file(out / "initial_poses.txt", init)
    log.info("wrote %d scans to %s", len(scene.scans), out)
    return EXIT_OK


def cmd_export_map(args) -> int:
    store = ScanStore(args.scan_dir, capacity=1)
    traj = read_pose_file(args.poses)
    check_trajectory(traj, store.entries)
    n = export_map(traj, store, args.output, args.subsample_cell)
    log.info("wrote %d points to %s", n, args.output)
    return EXIT_OK


COMMANDS = {
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "generate": cmd_generate,
    "export-map": cmd_export_map,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OptimizationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, MetricError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
