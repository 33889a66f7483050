"""Newline-delimited JSON dataset format.

A dataset directory holds one file per stream: ``imu.jsonl``, ``dvl.jsonl``,
``cam.jsonl``, ``landmarks.jsonl`` and ``gt.jsonl``. The first line of every
file is a header record (format name and version, stream name, units, rig
echo and seed); every following line is one record with a ``t`` field in
seconds. Ground truth lives only in ``gt.jsonl`` and ``landmarks.jsonl`` so
that estimators can be pointed at a directory without them.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .dvl import TransducerGeometry
from .errors import DataError, NonMonotoneTime
from .factors import CameraModel, ExtrinsicSet
from .preintegration import ImuStream
from .simulator import (
    CameraFrame,
    GroundTruth,
    NoiseSpec,
    SensorRig,
    SyntheticDataset,
    TrajectorySpec,
)

FORMAT_NAME = "avins-jsonl"
FORMAT_VERSION = 1
STREAMS = ("imu", "dvl", "cam", "landmarks", "gt")
UNITS = {
    "t": "s",
    "omega": "rad/s",
    "accel": "m/s^2",
    "beams": "m/s",
    "pixels": "px",
    "position": "m",
    "velocity": "m/s",
    "angles": "deg",
}


# ---------------------------------------------------------------------------
# Rig echo


def rig_to_dict(rig: SensorRig) -> dict:
    n = rig.noise
    return {
        "extrinsics": rig.extrinsics.to_dict(),
        "geometry": rig.geometry.to_dict(),
        "camera": rig.camera.to_dict(),
        "imu_rate": rig.imu_rate,
        "dvl_rate": rig.dvl_rate,
        "camera_rate": rig.camera_rate,
        "gravity": rig.gravity,
        "noise": {
            "gyro_density": n.gyro_density,
            "accel_density": n.accel_density,
            "gyro_walk": n.gyro_walk,
            "accel_walk": n.accel_walk,
            "sigma_d": n.sigma_d,
            "pixel_sigma": n.pixel_sigma,
            "gyro_bias_sigma": n.gyro_bias_sigma,
            "accel_bias_sigma": n.accel_bias_sigma,
            "gyro_bias": list(map(float, n.gyro_bias)),
            "accel_bias": list(map(float, n.accel_bias)),
        },
    }


def rig_from_dict(d: dict) -> SensorRig:
    noise = dict(d.get("noise", {}))
    for k in ("gyro_bias", "accel_bias"):
        if k in noise:
            noise[k] = tuple(noise[k])
    return SensorRig(
        extrinsics=ExtrinsicSet.from_dict(d["extrinsics"]),
        geometry=TransducerGeometry.from_dict(d["geometry"]),
        camera=CameraModel(**d["camera"]),
        imu_rate=float(d["imu_rate"]),
        dvl_rate=float(d["dvl_rate"]),
        camera_rate=float(d["camera_rate"]),
        noise=NoiseSpec(**noise),
        gravity=float(d.get("gravity", 9.81)),
    )


def spec_to_dict(spec: Optional[TrajectorySpec]) -> Optional[dict]:
    if spec is None:
        return None
    out = {}
    for k, v in spec.__dict__.items():
        out[k] = np.asarray(v, float).tolist() if isinstance(v, (tuple, list, np.ndarray)) else v
    return out


# ---------------------------------------------------------------------------
# Low-level JSONL


def _header(stream: str, ds: SyntheticDataset) -> dict:
    return {
        "header": {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "stream": stream,
            "units": UNITS,
            "seed": ds.seed,
            "rig": rig_to_dict(ds.rig),
            "trajectory": spec_to_dict(ds.spec),
        }
    }


def _write(path: Path, header: dict, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _read(path: Path, stream: str) -> Tuple[dict, Iterator[Tuple[int, dict]]]:
    """Header plus an iterator of (line number, record)."""
    if not path.exists():
        raise DataError(f"{path}: file not found")
    fh = open(path, encoding="utf-8")
    lines = enumerate(fh, start=1)

    def parse(lineno: int, text: str) -> dict:
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise DataError(f"{path}:{lineno}: record is not an object")
        return rec

    try:
        lineno, first = next(lines)
    except StopIteration:
        fh.close()
        raise DataError(f"{path}:1: empty file, header record expected")
    head = parse(lineno, first).get("header")
    if not isinstance(head, dict) or head.get("format") != FORMAT_NAME:
        fh.close()
        raise DataError(f"{path}:1: missing {FORMAT_NAME} header")
    if head.get("version") != FORMAT_VERSION:
        fh.close()
        raise DataError(f"{path}:1: unsupported format version {head.get('version')!r}")
    if head.get("stream") != stream:
        fh.close()
        raise DataError(f"{path}:1: expected stream {stream!r}, found {head.get('stream')!r}")

    def records():
        with fh:
            for n, text in lines:
                if text.strip():
                    yield n, parse(n, text)

    return head, records()


def _field(path: Path, lineno: int, rec: dict, key: str, shape=None) -> np.ndarray:
    if key not in rec:
        raise DataError(f"{path}:{lineno}: missing field {key!r}")
    try:
        arr = np.asarray(rec[key], float)
        if shape is not None:
            arr = arr.reshape(shape)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}:{lineno}: field {key!r} has the wrong shape or type") from exc
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}:{lineno}: field {key!r} is not finite")
    return arr


def _times(path: Path, t: List[float], lines: List[int], strict: bool = True) -> np.ndarray:
    arr = np.asarray(t, float)
    bad = np.flatnonzero(np.diff(arr) <= 0 if strict else np.diff(arr) < 0)
    if bad.size:
        raise NonMonotoneTime(f"{path}:{lines[bad[0] + 1]}: timestamps must increase")
    return arr


# ---------------------------------------------------------------------------
# Dataset


def write_dataset(ds: SyntheticDataset, directory, ground_truth: bool = True) -> Path:
    """Write all streams of ``ds`` into ``directory`` (created if needed)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write(d / "imu.jsonl", _header("imu", ds), (
        {"t": float(t), "omega": w.tolist(), "accel": a.tolist()}
        for t, w, a in zip(ds.imu.t, ds.imu.omega, ds.imu.accel)))
    _write(d / "dvl.jsonl", _header("dvl", ds), (
        {"t": float(t), "beams": b.tolist()} for t, b in zip(ds.dvl_t, ds.dvl_beams)))
    _write(d / "cam.jsonl", _header("cam", ds), (
        {"t": float(f.t), "ids": [int(i) for i in f.ids], "uv": f.meas.tolist()} for f in ds.frames))
    if ground_truth:
        _write(d / "landmarks.jsonl", _header("landmarks", ds), (
            {"t": 0.0, "id": int(i), "p": p.tolist()} for i, p in zip(ds.landmark_ids, ds.landmarks_c0)))
        g = ds.gt
        _write(d / "gt.jsonl", _header("gt", ds), (
            {"t": float(g.t[k]), "R": g.R[k].reshape(9).tolist(), "p": g.p[k].tolist(), "v": g.v[k].tolist(),
             "bias_gyro": g.bias_gyro[k].tolist(), "bias_accel": g.bias_accel[k].tolist(),
             "R_WI": g.R_WI[k].reshape(9).tolist(), "p_WI": g.p_WI[k].tolist()}
            for k in range(len(g.t))))
    return d


def read_ground_truth(path) -> GroundTruth:
    path = Path(path)
    _, recs = _read(path, "gt")
    cols = {k: [] for k in ("t", "R", "p", "v", "bias_gyro", "bias_accel", "R_WI", "p_WI")}
    lines = []
    shapes = {"R": (3, 3), "R_WI": (3, 3), "p": (3,), "v": (3,), "bias_gyro": (3,), "bias_accel": (3,),
              "p_WI": (3,)}
    for n, rec in recs:
        lines.append(n)
        cols["t"].append(float(_field(path, n, rec, "t", ())))
        for k, shp in shapes.items():
            cols[k].append(_field(path, n, rec, k, shp))
    t = _times(path, cols["t"], lines)
    arr = {k: np.array(v).reshape((-1,) + shapes[k]) for k, v in cols.items() if k != "t"}
    return GroundTruth(t, arr["R"], arr["p"], arr["v"], arr["bias_gyro"], arr["bias_accel"],
                       arr["R_WI"], arr["p_WI"])


def read_dataset(directory, ground_truth: bool = True) -> SyntheticDataset:
    """Load a dataset directory written by :func:`write_dataset`.

    Without ``ground_truth`` (or when the files are absent) the truth fields
    are left empty.
    """
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: dataset directory not found")
    head, recs = _read(d / "imu.jsonl", "imu")
    t, w, a, lines = [], [], [], []
    for n, rec in recs:
        lines.append(n)
        t.append(float(_field(d / "imu.jsonl", n, rec, "t", ())))
        w.append(_field(d / "imu.jsonl", n, rec, "omega", (3,)))
        a.append(_field(d / "imu.jsonl", n, rec, "accel", (3,)))
    if not t:
        raise DataError(f"{d / 'imu.jsonl'}: no IMU records")
    imu = ImuStream(_times(d / "imu.jsonl", t, lines), np.array(w), np.array(a))

    _, recs = _read(d / "dvl.jsonl", "dvl")
    t, beams, lines = [], [], []
    for n, rec in recs:
        lines.append(n)
        t.append(float(_field(d / "dvl.jsonl", n, rec, "t", ())))
        beams.append(_field(d / "dvl.jsonl", n, rec, "beams", (4,)))
    dvl_t = _times(d / "dvl.jsonl", t, lines)

    _, recs = _read(d / "cam.jsonl", "cam")
    frames, t, lines = [], [], []
    for n, rec in recs:
        lines.append(n)
        ft = float(_field(d / "cam.jsonl", n, rec, "t", ()))
        ids = _field(d / "cam.jsonl", n, rec, "ids").astype(int).reshape(-1)
        uv = _field(d / "cam.jsonl", n, rec, "uv").reshape(-1, 3)
        if len(ids) != len(uv):
            raise DataError(f"{d / 'cam.jsonl'}:{n}: {len(ids)} ids but {len(uv)} measurements")
        t.append(ft)
        frames.append(CameraFrame(ft, ids, uv))
    _times(d / "cam.jsonl", t, lines)

    rig = rig_from_dict(head["rig"])
    spec = TrajectorySpec(**head["trajectory"]) if head.get("trajectory") else None
    if ground_truth and (d / "gt.jsonl").exists():
        gt = read_ground_truth(d / "gt.jsonl")
        _, recs = _read(d / "landmarks.jsonl", "landmarks")
        ids, pts = [], []
        for n, rec in recs:
            ids.append(int(_field(d / "landmarks.jsonl", n, rec, "id", ())))
            pts.append(_field(d / "landmarks.jsonl", n, rec, "p", (3,)))
        landmark_ids = np.array(ids, int)
        landmarks = np.array(pts, float).reshape(-1, 3)
    else:
        z = np.zeros((0, 3))
        gt = GroundTruth(np.zeros(0), np.zeros((0, 3, 3)), z, z, z, z, np.zeros((0, 3, 3)), z)
        landmark_ids, landmarks = np.zeros(0, int), z
    return SyntheticDataset(imu, dvl_t, np.array(beams).reshape(-1, 4), frames, landmark_ids, landmarks, gt,
                            rig, int(head.get("seed", 0)), spec)


# ---------------------------------------------------------------------------
# Trajectory estimates


def write_trajectory(estimate, path, extra: Optional[dict] = None) -> Path:
    """Estimated keyframe states as JSONL (header plus one record per keyframe)."""
    path = Path(path)
    header = {"header": {"format": FORMAT_NAME, "version": FORMAT_VERSION, "stream": "trajectory",
                         "units": UNITS, "R_WI0": np.asarray(estimate.R_WI0).reshape(9).tolist(),
                         **(extra or {})}}
    _write(path, header, (
        {"t": float(estimate.t[k]), "R": estimate.R[k].reshape(9).tolist(), "p": estimate.p[k].tolist(),
         "v": estimate.v[k].tolist(), "bias": estimate.bias[k].tolist(), "mode": str(estimate.modes[k].value)}
        for k in range(len(estimate.t))))
    return path


def read_trajectory(path):
    from .estimator import Mode, TrajectoryEstimate

    path = Path(path)
    head, recs = _read(path, "trajectory")
    t, R, p, v, b, modes, lines = [], [], [], [], [], [], []
    for n, rec in recs:
        lines.append(n)
        t.append(float(_field(path, n, rec, "t", ())))
        R.append(_field(path, n, rec, "R", (3, 3)))
        p.append(_field(path, n, rec, "p", (3,)))
        v.append(_field(path, n, rec, "v", (3,)) if "v" in rec else np.zeros(3))
        b.append(_field(path, n, rec, "bias", (6,)) if "bias" in rec else np.zeros(6))
        try:
            modes.append(Mode(rec.get("mode", Mode.VISUAL.value)))
        except ValueError as exc:
            raise DataError(f"{path}:{n}: unknown mode {rec.get('mode')!r}") from exc
    return TrajectoryEstimate(_times(path, t, lines), np.array(R).reshape(-1, 3, 3), np.array(p).reshape(-1, 3),
                              np.array(v).reshape(-1, 3), np.array(b).reshape(-1, 6), modes,
                              np.asarray(head.get("R_WI0", np.eye(3).reshape(9)), float).reshape(3, 3))
