"""YAML configuration documents.

Every section is optional; missing keys keep the library defaults. Layout::

    seed: 0
    simulation:
      trajectory: {kind: lissajous, duration: 60.0}
      rig: {imu_rate: 330, noise: {sigma_d: 0.01}, extrinsics: {...}}
      world: {n_landmarks: 500}
      dropout: [[20.0, 40.0]]
    estimator:
      window: 10
      keyframe_stride: 1
      extrinsics: rig            # "rig", "identity", a mapping, or a calibration JSON path
    calibration:
      keyframes: 100
      stride: 1
      initial_extrinsics: identity
      settings: {bias_mode: shared}
    misalignment:
      keyframes: 100
      extrinsics: rig
      settings: {knot_spacing: 0.5}
    evaluation:
      tolerance: 0.005

Extrinsic mappings use ``R_ID``, ``p_ID``, ``R_DC``, ``p_DC`` and
``R_WI0``; rotations are either 3x3 matrices or rotation vectors in
radians. Transducer angles are given in degrees (``alpha_deg``,
``beta_deg``).
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Union

import numpy as np
import yaml

from .calibration import CalibrationSettings
from .dvl import TransducerGeometry
from .errors import ConfigError
from .estimator import EstimatorConfig
from .factors import CameraModel, ExtrinsicSet
from .geometry import RigidTransform, exp_so3
from .optimizer import SolverSettings
from .preintegration import ImuNoise
from .simulator import NoiseSpec, SensorRig, TrajectorySpec, WorldSpec


def parse_rotation(value, where: str) -> np.ndarray:
    arr = np.asarray(value, float)
    if arr.shape == (3,):
        return exp_so3(arr)
    if arr.shape == (3, 3):
        if not np.allclose(arr @ arr.T, np.eye(3), atol=1e-6) or np.linalg.det(arr) < 0:
            raise ConfigError(f"{where}: not a rotation matrix")
        return arr
    raise ConfigError(f"{where}: rotation must be a 3-vector or a 3x3 matrix")


def parse_extrinsics(d: Any, where: str, rig: Optional[ExtrinsicSet] = None) -> ExtrinsicSet:
    """Mapping, ``"identity"``, ``"rig"`` or a path to a JSON file with an ``extrinsics`` entry."""
    if isinstance(d, str):
        if d == "identity":
            return ExtrinsicSet()
        if d == "rig":
            if rig is None:
                raise ConfigError(f"{where}: 'rig' extrinsics need a dataset header")
            return rig
        path = Path(d)
        if not path.exists():
            raise ConfigError(f"{where}: extrinsics file {d!r} not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        return parse_extrinsics(doc.get("extrinsics", doc), str(path), rig)
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: extrinsics must be a mapping or a string")
    unknown = set(d) - {"R_ID", "p_ID", "R_DC", "p_DC", "R_WI0"}
    if unknown:
        raise ConfigError(f"{where}: unknown extrinsic keys {sorted(unknown)}")
    base = rig or ExtrinsicSet()
    try:
        R_ID = parse_rotation(d["R_ID"], f"{where}.R_ID") if "R_ID" in d else base.T_ID.rotation
        R_DC = parse_rotation(d["R_DC"], f"{where}.R_DC") if "R_DC" in d else base.T_DC.rotation
        R_WI0 = parse_rotation(d["R_WI0"], f"{where}.R_WI0") if "R_WI0" in d else base.R_WI0
        p_ID = np.asarray(d.get("p_ID", base.T_ID.translation), float).reshape(3)
        p_DC = np.asarray(d.get("p_DC", base.T_DC.translation), float).reshape(3)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: malformed extrinsics ({exc})") from exc
    return ExtrinsicSet(RigidTransform(R_ID, p_ID), RigidTransform(R_DC, p_DC), R_WI0)


def _geometry(d: Any, where: str) -> TransducerGeometry:
    if not isinstance(d, dict) or set(d) - {"alpha_deg", "beta_deg"}:
        raise ConfigError(f"{where}: expected alpha_deg and beta_deg")
    g = TransducerGeometry.nominal()
    try:
        a = np.deg2rad(d["alpha_deg"]) if "alpha_deg" in d else g.alpha
        b = np.deg2rad(d["beta_deg"]) if "beta_deg" in d else g.beta
        return TransducerGeometry(a, b)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: malformed transducer angles ({exc})") from exc


_SPECIAL = {
    ExtrinsicSet: lambda d, where: parse_extrinsics(d, where),
    TransducerGeometry: _geometry,
}


def build(cls, data: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    if cls in _SPECIAL:
        return _SPECIAL[cls](data, where)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        origin = typing.get_origin(tp)
        if origin is Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            tp = args[0] if len(args) == 1 else tp
            origin = typing.get_origin(tp)
        if dataclasses.is_dataclass(value) or isinstance(value, (ExtrinsicSet, TransducerGeometry)):
            kwargs[key] = value
        elif value is not None and (dataclasses.is_dataclass(tp) or tp in _SPECIAL):
            kwargs[key] = build(tp, value, f"{where}.{key}")
        elif isinstance(value, list) and origin in (tuple, typing.Sequence, None):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class SimulationSection:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    rig: SensorRig = field(default_factory=SensorRig)
    world: WorldSpec = field(default_factory=WorldSpec)
    dropout: List[tuple] = field(default_factory=list)


@dataclass
class CalibrationSection:
    keyframes: int = 100
    stride: int = 1
    start: int = 0
    initial_extrinsics: Any = "identity"
    settings: CalibrationSettings = field(default_factory=CalibrationSettings)


@dataclass
class MisalignmentSection:
    keyframes: int = 100
    stride: int = 1
    start: int = 0
    extrinsics: Any = "rig"
    settings: CalibrationSettings = field(default_factory=CalibrationSettings)


@dataclass
class PipelineConfig:
    seed: int = 0
    simulation: SimulationSection = field(default_factory=SimulationSection)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    estimator_extrinsics: Any = "rig"
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    misalignment: MisalignmentSection = field(default_factory=MisalignmentSection)
    evaluation_tolerance: float = 5e-3


def _rig(d: Any, where: str) -> SensorRig:
    if d is None:
        return SensorRig()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    d = dict(d)
    kwargs = {}
    if "extrinsics" in d:
        kwargs["extrinsics"] = parse_extrinsics(d.pop("extrinsics"), f"{where}.extrinsics")
    if "geometry" in d:
        kwargs["geometry"] = _geometry(d.pop("geometry"), f"{where}.geometry")
    if "camera" in d:
        kwargs["camera"] = build(CameraModel, d.pop("camera"), f"{where}.camera")
    if "noise" in d:
        kwargs["noise"] = build(NoiseSpec, d.pop("noise"), f"{where}.noise")
    kwargs.update(d)
    try:
        return SensorRig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _estimator(d: Any, where: str):
    """EstimatorConfig plus the unresolved extrinsics source."""
    if d is None:
        return EstimatorConfig(), "rig"
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    d = dict(d)
    source = d.pop("extrinsics", "rig")
    if "imu_noise" in d:
        d["imu_noise"] = build(ImuNoise, d["imu_noise"], f"{where}.imu_noise")
    if "solver" in d:
        base = dataclasses.asdict(EstimatorConfig().solver)
        base.update(d["solver"] or {})
        d["solver"] = build(SolverSettings, base, f"{where}.solver")
    return build(EstimatorConfig, d, where), source


def _settings(d: Any, where: str) -> CalibrationSettings:
    if d is None:
        return CalibrationSettings()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    d = dict(d)
    if "solver" in d:
        d["solver"] = build(SolverSettings, d["solver"], f"{where}.solver")
    if "imu_noise" in d:
        d["imu_noise"] = build(ImuNoise, d["imu_noise"], f"{where}.imu_noise")
    return build(CalibrationSettings, d, where)


def _section(cls, d: Any, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    d = dict(d)
    if "settings" in d:
        d["settings"] = _settings(d["settings"], f"{where}.settings")
    return build(cls, d, where)


def config_from_dict(doc: Any, where: str = "config") -> PipelineConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: top level must be a mapping")
    allowed = {"seed", "simulation", "estimator", "calibration", "misalignment", "evaluation"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown sections {sorted(unknown)}")
    sim = doc.get("simulation") or {}
    if not isinstance(sim, dict):
        raise ConfigError(f"{where}.simulation: expected a mapping")
    bad = set(sim) - {"trajectory", "rig", "world", "dropout"}
    if bad:
        raise ConfigError(f"{where}.simulation: unknown keys {sorted(bad)}")
    simulation = SimulationSection(
        trajectory=build(TrajectorySpec, sim.get("trajectory"), f"{where}.simulation.trajectory"),
        rig=_rig(sim.get("rig"), f"{where}.simulation.rig"),
        world=build(WorldSpec, sim.get("world"), f"{where}.simulation.world"),
        dropout=[tuple(map(float, w)) for w in sim.get("dropout") or []],
    )
    estimator, source = _estimator(doc.get("estimator"), f"{where}.estimator")
    ev = doc.get("evaluation") or {}
    if not isinstance(ev, dict) or set(ev) - {"tolerance"}:
        raise ConfigError(f"{where}.evaluation: only 'tolerance' is supported")
    try:
        seed = int(doc.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.seed: must be an integer") from exc
    return PipelineConfig(
        seed=seed,
        simulation=simulation,
        estimator=estimator,
        estimator_extrinsics=source,
        calibration=_section(CalibrationSection, doc.get("calibration"), f"{where}.calibration"),
        misalignment=_section(MisalignmentSection, doc.get("misalignment"), f"{where}.misalignment"),
        evaluation_tolerance=float(ev.get("tolerance", 5e-3)),
    )


def load_config(path) -> PipelineConfig:
    """Read a YAML document; parse errors carry file and line."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 0
        raise ConfigError(f"{path}:{line}: invalid YAML ({getattr(exc, 'problem', exc)})") from exc
    return config_from_dict(doc, str(path))
