"""Command-line entry point.

Subcommands::

    avins simulate            --config CFG --seed N --out DIR
    avins estimate            --data DIR --config CFG --out TRAJ.jsonl
    avins calibrate-extrinsic --data DIR --config CFG --out CALIB.json
    avins calibrate-dvl       --data DIR --config CFG --extrinsics CALIB.json --out DVL.json
    avins evaluate            --estimate TRAJ.jsonl --ground-truth DIR|gt.jsonl [--csv ERR.csv]
    avins check-jacobians     [--points 20] [--seed 0]

Results are printed as JSON on stdout. Failures print one JSON object on
stderr and exit with the code of their category.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .calibration import CalibrationData, CalibrationSession, MisalignmentSession, extrinsic_errors
from .config import PipelineConfig, load_config, parse_extrinsics
from .dataset_io import read_dataset, read_ground_truth, read_trajectory, write_dataset, write_trajectory
from .errors import AvinsError, ConfigError, DataError
from .estimator import run_estimator
from .evaluation import PoseSeries, evaluate
from .jacobians import JACOBIAN_TOLERANCE, check_all
from .simulator import degrade_vision, generate

logger = logging.getLogger("avins")

EXIT_CODES = {"config": 2, "data": 3, "solver": 4, "observability": 5}
EXIT_CHECK_FAILED = 1


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=2, default=_json_default)
    sys.stdout.write("\n")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return str(x)


def _write_json(path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, default=_json_default) + "\n")


def _has_truth(ds) -> bool:
    return len(ds.gt.t) > 0


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args, cfg: PipelineConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    sim = cfg.simulation
    ds = generate(sim.trajectory, sim.rig, sim.world, seed=seed)
    if sim.dropout:
        ds = degrade_vision(ds, sim.dropout)
    write_dataset(ds, args.out, ground_truth=not args.no_ground_truth)
    _emit({"out": str(args.out), "seed": seed, "digest": ds.digest(), "imu_samples": len(ds.imu.t),
           "dvl_samples": len(ds.dvl_t), "camera_frames": len(ds.frames), "observations": ds.n_observations()})
    return 0


def cmd_estimate(args, cfg: PipelineConfig) -> int:
    ds = read_dataset(args.data, ground_truth=False)
    config = cfg.estimator
    source = args.extrinsics if args.extrinsics is not None else cfg.estimator_extrinsics
    config.extrinsics = parse_extrinsics(source, "estimator.extrinsics", ds.rig.extrinsics)
    est = run_estimator(ds, config, ds.rig.camera)
    write_trajectory(est, args.out)
    fallback = est.fallback_mask
    _emit({"out": str(args.out), "keyframes": len(est), "fallback_keyframes": int(fallback.sum()),
           "final_position": est.p[-1] if len(est) else None})
    return 0


def cmd_calibrate_extrinsic(args, cfg: PipelineConfig) -> int:
    ds = read_dataset(args.data)
    sec = cfg.calibration
    data = CalibrationData.from_dataset(ds, sec.keyframes, sec.stride, sec.start)
    initial = parse_extrinsics(sec.initial_extrinsics, "calibration.initial_extrinsics", ds.rig.extrinsics)
    session = CalibrationSession(data, sec.settings, initial, ds.rig.geometry)
    E = session.run()
    doc = {"extrinsics": E.to_dict(), "report": session.report()}
    if _has_truth(ds):
        doc["errors_vs_rig"] = extrinsic_errors(E, ds.rig.extrinsics)
    _write_json(args.out, doc)
    _emit({"out": str(args.out), "extrinsics": E.to_dict(), **({"errors_vs_rig": doc["errors_vs_rig"]}
                                                              if "errors_vs_rig" in doc else {})})
    return 0


def cmd_calibrate_dvl(args, cfg: PipelineConfig) -> int:
    ds = read_dataset(args.data, ground_truth=False)
    sec = cfg.misalignment
    source = args.extrinsics if args.extrinsics is not None else sec.extrinsics
    E = parse_extrinsics(source, "misalignment.extrinsics", ds.rig.extrinsics)
    data = CalibrationData.from_dataset(ds, sec.keyframes, sec.stride, sec.start)
    est = MisalignmentSession(data, E, sec.settings).run()
    doc = {"geometry": est.geometry.to_dict(), "estimate": est.to_dict()}
    _write_json(args.out, doc)
    _emit({"out": str(args.out), **doc})
    return 0


def _load_truth(path) -> PoseSeries:
    p = Path(path)
    if p.is_dir():
        ds = read_dataset(p)
        if not _has_truth(ds):
            raise DataError(f"{p}: dataset has no ground truth")
        gt = ds.gt
    else:
        gt = read_ground_truth(p)
    return PoseSeries(gt.t, gt.R, gt.p)


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    est = read_trajectory(args.estimate)
    gt = _load_truth(args.ground_truth)
    tol = cfg.evaluation_tolerance if args.tolerance is None else args.tolerance
    rep = evaluate(PoseSeries(est.t, est.R, est.p), gt, tol)
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    logger.info("%s", rep.summary())
    _emit(rep.to_dict())
    return 0


def cmd_check_jacobians(args, cfg: PipelineConfig) -> int:
    results = check_all(args.points, args.seed)
    _emit({"tolerance": JACOBIAN_TOLERANCE, "points": args.points,
           "checks": {r.name: {"max_relative_error": r.max_relative_error, "passed": r.passed} for r in results}})
    return 0 if all(r.passed for r in results) else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    """Usage errors become config errors so they share the JSON error path."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avins", description="Visual-inertial-acoustic navigation and calibration tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", help="YAML configuration")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--no-ground-truth", action="store_true", help="omit gt.jsonl and landmarks.jsonl")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", help="run the sliding-window estimator")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="YAML configuration")
    s.add_argument("--extrinsics", help="'rig', 'identity' or a calibration JSON (overrides the config)")
    s.add_argument("--out", required=True, help="trajectory JSONL")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("calibrate-extrinsic", help="calibrate IMU-DVL-camera extrinsics")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="YAML configuration")
    s.add_argument("--out", required=True, help="calibration JSON")
    s.set_defaults(func=cmd_calibrate_extrinsic)

    s = sub.add_parser("calibrate-dvl", help="calibrate DVL transducer angles")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="YAML configuration")
    s.add_argument("--extrinsics", help="'rig', 'identity' or a calibration JSON (overrides the config)")
    s.add_argument("--out", required=True, help="transducer calibration JSON")
    s.set_defaults(func=cmd_calibrate_dvl)

    s = sub.add_parser("evaluate", help="trajectory RMSE against ground truth")
    s.add_argument("--estimate", required=True, help="trajectory JSONL")
    s.add_argument("--ground-truth", required=True, help="dataset directory or gt.jsonl")
    s.add_argument("--config", help="YAML configuration")
    s.add_argument("--tolerance", type=float, help="timestamp matching tolerance in seconds")
    s.add_argument("--csv", help="write per-pose errors to this CSV file")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("check-jacobians", help="finite-difference check of all analytic Jacobians")
    s.add_argument("--points", type=int, default=20, help="random configurations per check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_check_jacobians)
    return p


def _report_error(exc: AvinsError) -> int:
    doc = {"error": exc.category, "type": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(doc) + "\n")
    return EXIT_CODES.get(exc.category, EXIT_CODES["solver"])


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except AvinsError as exc:
        return _report_error(exc)
    except FileNotFoundError as exc:
        return _report_error(DataError(f"{exc.filename}: file not found"))
    except np.linalg.LinAlgError as exc:
        from .errors import SolverError

        return _report_error(SolverError(str(exc)))


if __name__ == "__main__":
    sys.exit(main())
