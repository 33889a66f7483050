"""Synthetic ground truth and sensor streams.

The vehicle body frame is the IMU frame I. Its attitude is a ZYX Euler
sequence composed with a fixed mount that points the sensor z axes down
(towards the seabed), while the world z axis points up against gravity.
Landmarks are scattered over a seabed patch beneath the trajectory.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .dvl import TransducerGeometry, projection_vectors
from .factors import CameraModel, ExtrinsicSet, GravityModel, KeyframeState
from .geometry import RigidTransform, exp_so3, log_so3
from .preintegration import ImuBias, ImuStream

logger = logging.getLogger(__name__)

MOUNT = np.diag([1.0, -1.0, -1.0])


@dataclass
class TrajectorySpec:
    """Smooth vehicle motion.

    ``kind`` is one of ``static``, ``circle``, ``lissajous`` or ``spline``.
    Attitude is ``Rz(yaw) Ry(pitch) Rx(roll)`` followed by the sensor mount;
    each angle oscillates with the given amplitude and frequency on top of
    ``attitude_offset`` (and ``heading_rate * t`` for yaw).
    """

    kind: str = "lissajous"
    duration: float = 60.0
    center: Sequence[float] = (0.0, 0.0, 0.0)
    radius: float = 2.0
    speed: float = 0.2
    amplitude: Sequence[float] = (3.0, 2.0, 0.4)
    frequency: Sequence[float] = (1.0 / 40.0, 1.0 / 25.0, 1.0 / 12.0)
    phase: Sequence[float] = (0.0, 0.5 * np.pi, 0.0)
    rotation_amplitude: Sequence[float] = (0.15, 0.15, 0.3)
    rotation_frequency: Sequence[float] = (0.13, 0.09, 0.05)
    attitude_offset: Sequence[float] = (0.0, 0.0, 0.0)
    heading_rate: float = 0.0
    waypoints: Optional[Sequence[Sequence[float]]] = None

    def __post_init__(self):
        if self.kind not in ("static", "circle", "lissajous", "spline"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.kind == "spline" and (self.waypoints is None or len(self.waypoints) < 2):
            raise ValueError("spline trajectories need at least two waypoints")


@dataclass
class TrajectorySample:
    p: np.ndarray  # (N, 3) IMU position in world
    v: np.ndarray  # (N, 3) world velocity
    a: np.ndarray  # (N, 3) world acceleration
    R: np.ndarray  # (N, 3, 3) R_WI
    omega: np.ndarray  # (N, 3) body angular rate


class Trajectory:
    """Analytic pose, velocity, acceleration and angular rate of the IMU."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        self._spline = None
        if spec.kind == "spline":
            wp = np.asarray(spec.waypoints, float)
            tk = np.linspace(0.0, spec.duration, len(wp))
            self._spline = CubicSpline(tk, wp, axis=0, bc_type="natural")

    def _euler(self, t):
        s = self.spec
        A = np.asarray(s.rotation_amplitude, float)
        f = 2.0 * np.pi * np.asarray(s.rotation_frequency, float)
        off = np.asarray(s.attitude_offset, float)
        if s.kind == "static":
            ang = np.tile(off, (len(t), 1))
            return ang, np.zeros_like(ang)
        arg = np.outer(t, f)
        ang = off + A * np.sin(arg)
        rate = A * f * np.cos(arg)
        ang[:, 2] += s.heading_rate * t
        rate[:, 2] += s.heading_rate
        return ang, rate

    def _position(self, t):
        s = self.spec
        c = np.asarray(s.center, float)
        n = len(t)
        if s.kind == "static":
            return np.tile(c, (n, 1)), np.zeros((n, 3)), np.zeros((n, 3))
        if s.kind == "circle":
            W = s.speed / s.radius
            th = W * t
            p = c + s.radius * np.column_stack([np.cos(th), np.sin(th), np.zeros(n)])
            v = s.speed * np.column_stack([-np.sin(th), np.cos(th), np.zeros(n)])
            a = -s.speed * W * np.column_stack([np.cos(th), np.sin(th), np.zeros(n)])
            return p, v, a
        if s.kind == "lissajous":
            A = np.asarray(s.amplitude, float)
            w = 2.0 * np.pi * np.asarray(s.frequency, float)
            ph = np.asarray(s.phase, float)
            arg = np.outer(t, w) + ph
            # Offset so that the path starts at the center.
            p = c + A * (np.sin(arg) - np.sin(ph))
            v = A * w * np.cos(arg)
            a = -A * w * w * np.sin(arg)
            return p, v, a
        sp = self._spline
        return sp(t), sp(t, 1), sp(t, 2)

    def sample(self, t) -> TrajectorySample:
        t = np.atleast_1d(np.asarray(t, float))
        p, v, a = self._position(t)
        ang, rate = self._euler(t)
        r, pch, y = ang[:, 0], ang[:, 1], ang[:, 2]
        dr, dp, dy = rate[:, 0], rate[:, 1], rate[:, 2]
        cr, sr, cp, spp, cy, sy = np.cos(r), np.sin(r), np.cos(pch), np.sin(pch), np.cos(y), np.sin(y)
        Re = np.empty((len(t), 3, 3))
        Re[:, 0, 0] = cy * cp
        Re[:, 0, 1] = cy * spp * sr - sy * cr
        Re[:, 0, 2] = cy * spp * cr + sy * sr
        Re[:, 1, 0] = sy * cp
        Re[:, 1, 1] = sy * spp * sr + cy * cr
        Re[:, 1, 2] = sy * spp * cr - cy * sr
        Re[:, 2, 0] = -spp
        Re[:, 2, 1] = cp * sr
        Re[:, 2, 2] = cp * cr
        w_e = np.column_stack([
            dr - dy * spp,
            dp * cr + dy * sr * cp,
            -dp * sr + dy * cr * cp,
        ])
        R = Re @ MOUNT
        omega = w_e @ MOUNT  # MOUNT^T w_e, MOUNT is symmetric
        return TrajectorySample(p, v, a, R, omega)


@dataclass
class NoiseSpec:
    gyro_density: float = 1e-3
    accel_density: float = 1e-2
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4
    sigma_d: float = 0.01
    pixel_sigma: float = 1.0
    gyro_bias_sigma: float = 0.0
    accel_bias_sigma: float = 0.0
    gyro_bias: Sequence[float] = (0.0, 0.0, 0.0)
    accel_bias: Sequence[float] = (0.0, 0.0, 0.0)

    @classmethod
    def noiseless(cls) -> "NoiseSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def default_extrinsics() -> ExtrinsicSet:
    """True rig used by the default scenarios (a few degrees off identity)."""
    T_ID = RigidTransform(exp_so3(np.deg2rad([5.0, -5.0, 5.0])), [0.1, -0.05, 0.2])
    T_DC = RigidTransform(exp_so3(np.deg2rad([-4.0, 3.0, 5.0])), [0.05, 0.15, -0.1])
    return ExtrinsicSet(T_ID, T_DC, np.eye(3))


@dataclass
class SensorRig:
    extrinsics: ExtrinsicSet = field(default_factory=default_extrinsics)
    geometry: TransducerGeometry = field(default_factory=TransducerGeometry.nominal)
    camera: CameraModel = field(default_factory=CameraModel)
    imu_rate: float = 330.0
    dvl_rate: float = 5.0
    camera_rate: float = 20.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    gravity: float = 9.81

    def __post_init__(self):
        if not (self.imu_rate >= self.camera_rate > 0 and self.imu_rate >= self.dvl_rate > 0):
            raise ValueError("rates must satisfy imu >= camera and imu >= dvl")


@dataclass
class WorldSpec:
    n_landmarks: int = 500
    altitude: float = 2.5  # seabed distance below the trajectory center
    relief: float = 0.6
    margin: float = 2.5
    min_visible: int = 8
    min_depth: float = 0.3
    max_depth: float = 12.0


@dataclass
class CameraFrame:
    t: float
    ids: np.ndarray  # (K,) landmark ids
    meas: np.ndarray  # (K, 3) u, v, u_right


@dataclass
class GroundTruth:
    """Per camera frame truth; poses are camera poses in C0."""

    t: np.ndarray
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray  # DVL-frame velocity
    bias_gyro: np.ndarray
    bias_accel: np.ndarray
    R_WI: np.ndarray
    p_WI: np.ndarray

    def state(self, k: int) -> KeyframeState:
        return KeyframeState(self.R[k].copy(), self.p[k].copy(), self.v[k].copy(),
                             ImuBias(self.bias_gyro[k], self.bias_accel[k]))


@dataclass
class SyntheticDataset:
    imu: ImuStream
    dvl_t: np.ndarray
    dvl_beams: np.ndarray  # (M, 4)
    frames: List[CameraFrame]
    landmark_ids: np.ndarray
    landmarks_c0: np.ndarray  # (L, 3) in C0
    gt: GroundTruth
    rig: SensorRig
    seed: int
    spec: Optional[TrajectorySpec] = None

    @property
    def camera_times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.imu.t, self.imu.omega, self.imu.accel, self.dvl_t, self.dvl_beams,
                    self.landmarks_c0, self.gt.R, self.gt.p, self.gt.v):
            h.update(np.ascontiguousarray(arr).tobytes())
        for f in self.frames:
            h.update(np.float64(f.t).tobytes())
            h.update(np.ascontiguousarray(f.ids).tobytes())
            h.update(np.ascontiguousarray(f.meas).tobytes())
        return h.hexdigest()

    def n_observations(self) -> int:
        return int(sum(len(f.ids) for f in self.frames))

    def with_time_shift(self, dt: float) -> "SyntheticDataset":
        frames = [CameraFrame(f.t + dt, f.ids, f.meas) for f in self.frames]
        gt = replace(self.gt, t=self.gt.t + dt)
        return replace(self, imu=ImuStream(self.imu.t + dt, self.imu.omega, self.imu.accel),
                       dvl_t=self.dvl_t + dt, frames=frames, gt=gt)


def _project(R_WC, p_WC, pts, cam: CameraModel):
    x = (pts - p_WC) @ R_WC  # rows: R_WC^T (l - p)
    z = x[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x[:, 0] / z + cam.cx
        v = cam.fy * x[:, 1] / z + cam.cy
        ur = cam.fx * (x[:, 0] - cam.baseline) / z + cam.cx
    return np.column_stack([u, v, ur]), z


def _visible(meas, z, cam: CameraModel, world: WorldSpec):
    return (
        (z > world.min_depth) & (z < world.max_depth)
        & (meas[:, 0] >= 0) & (meas[:, 0] < cam.width)
        & (meas[:, 1] >= 0) & (meas[:, 1] < cam.height)
        & (meas[:, 2] >= 0) & (meas[:, 2] < cam.width)
    )


def generate(spec: TrajectorySpec, rig: Optional[SensorRig] = None, world: Optional[WorldSpec] = None,
             seed: int = 0) -> SyntheticDataset:
    """Simulate IMU, DVL and stereo landmark observations along ``spec``."""
    rig = rig or SensorRig()
    world = world or WorldSpec()
    rng = np.random.default_rng(seed)
    noise = rig.noise
    traj = Trajectory(spec)
    E = rig.extrinsics
    A, a_ID = E.T_ID.rotation, E.T_ID.translation
    R_IC, p_IC = E.R_IC, E.p_IC
    g_w = GravityModel(rig.gravity).g_w

    # IMU with bias random walk.
    n_imu = int(np.floor(spec.duration * rig.imu_rate + 1e-9)) + 1
    t_imu = np.arange(n_imu) / rig.imu_rate
    tr = traj.sample(t_imu)
    dt = 1.0 / rig.imu_rate
    bg0 = np.asarray(noise.gyro_bias, float) + noise.gyro_bias_sigma * rng.standard_normal(3)
    ba0 = np.asarray(noise.accel_bias, float) + noise.accel_bias_sigma * rng.standard_normal(3)
    walk_g = noise.gyro_walk * np.sqrt(dt) * rng.standard_normal((n_imu, 3))
    walk_a = noise.accel_walk * np.sqrt(dt) * rng.standard_normal((n_imu, 3))
    walk_g[0] = 0.0
    walk_a[0] = 0.0
    bg = bg0 + np.cumsum(walk_g, axis=0)
    ba = ba0 + np.cumsum(walk_a, axis=0)
    white_g = noise.gyro_density * np.sqrt(rig.imu_rate) * rng.standard_normal((n_imu, 3))
    white_a = noise.accel_density * np.sqrt(rig.imu_rate) * rng.standard_normal((n_imu, 3))
    f_body = np.einsum("nji,nj->ni", tr.R, tr.a - g_w)
    imu = ImuStream(t_imu, tr.omega + bg + white_g, f_body + ba + white_a)

    def dvl_frame_velocity(s: TrajectorySample):
        vb = np.einsum("nji,nj->ni", s.R, s.v) + np.cross(s.omega, a_ID)
        return vb @ A  # rows: R_ID^T vb

    # DVL beams.
    n_dvl = int(np.floor(spec.duration * rig.dvl_rate + 1e-9)) + 1
    t_dvl = np.arange(n_dvl) / rig.dvl_rate
    E_true = projection_vectors(rig.geometry)
    v_dvl = dvl_frame_velocity(traj.sample(t_dvl))
    beams = v_dvl @ E_true.T + noise.sigma_d * rng.standard_normal((n_dvl, 4))

    # Camera poses.
    n_cam = int(np.floor(spec.duration * rig.camera_rate + 1e-9)) + 1
    t_cam = np.arange(n_cam) / rig.camera_rate
    tc = traj.sample(t_cam)
    R_WC = tc.R @ R_IC
    p_WC = tc.p + np.einsum("nij,j->ni", tc.R, p_IC)

    # Landmarks on a seabed patch below the trajectory.
    cam = rig.camera
    lo = p_WC.min(axis=0) - world.margin
    hi = p_WC.max(axis=0) + world.margin
    floor_z = float(np.mean(tc.p[:, 2])) - world.altitude
    pts = np.column_stack([
        rng.uniform(lo[0], hi[0], world.n_landmarks),
        rng.uniform(lo[1], hi[1], world.n_landmarks),
        floor_z + world.relief * (rng.uniform(size=world.n_landmarks) - 0.5),
    ])
    extra = []
    for k in range(n_cam):
        meas, z = _project(R_WC[k], p_WC[k], pts, cam)
        count = int(_visible(meas, z, cam, world).sum())
        tries = 0
        while count < world.min_visible and tries < 1000:
            tries += 1
            uv = rng.uniform([0, 0], [cam.width - 1, cam.height - 1])
            ray = R_WC[k] @ np.array([(uv[0] - cam.cx) / cam.fx, (uv[1] - cam.cy) / cam.fy, 1.0])
            if ray[2] >= -1e-3:
                continue
            zf = floor_z + world.relief * (rng.uniform() - 0.5)
            cand = p_WC[k] + ray * (zf - p_WC[k][2]) / ray[2]
            m1, z1 = _project(R_WC[k], p_WC[k], cand[None], cam)
            if _visible(m1, z1, cam, world)[0]:
                pts = np.vstack([pts, cand])
                extra.append(cand)
                count += 1
    if extra:
        logger.debug("added %d landmarks to satisfy the visibility minimum", len(extra))

    frames = []
    ids_all = np.arange(len(pts))
    for k in range(n_cam):
        meas, z = _project(R_WC[k], p_WC[k], pts, cam)
        vis = _visible(meas, z, cam, world)
        m = meas[vis] + noise.pixel_sigma * rng.standard_normal((int(vis.sum()), 3))
        frames.append(CameraFrame(float(t_cam[k]), ids_all[vis], m))

    # Ground truth expressed in C0.
    R0, p0 = R_WC[0], p_WC[0]
    R_c0 = np.einsum("ji,njk->nik", R0, R_WC)
    p_c0 = (p_WC - p0) @ R0
    lm_c0 = (pts - p0) @ R0
    k_imu = np.clip(np.round(t_cam * rig.imu_rate).astype(int), 0, n_imu - 1)
    gt = GroundTruth(t_cam, R_c0, p_c0, dvl_frame_velocity(tc), bg[k_imu], ba[k_imu], tc.R, tc.p)
    rig_out = replace(rig, extrinsics=ExtrinsicSet(E.T_ID, E.T_DC, tc.R[0]))
    return SyntheticDataset(imu, t_dvl, beams, frames, ids_all, lm_c0, gt, rig_out, seed, spec)


def degrade_vision(dataset: SyntheticDataset, schedule: Sequence[Sequence[float]]) -> SyntheticDataset:
    """Remove camera observations inside [t_start, t_end) windows."""
    frames = []
    for f in dataset.frames:
        drop = any(t0 <= f.t < t1 for t0, t1 in schedule)
        if drop:
            frames.append(CameraFrame(f.t, f.ids[:0], f.meas[:0]))
        else:
            frames.append(f)
    return replace(dataset, frames=frames)


def true_extrinsics(dataset: SyntheticDataset) -> ExtrinsicSet:
    return dataset.rig.extrinsics


def extrinsic_error(E_est: ExtrinsicSet, E_true: ExtrinsicSet) -> dict:
    """Rotation (rad) and translation (m) errors of both transforms."""
    def rot(a, b):
        return float(np.linalg.norm(log_so3(a.T @ b)))

    return {
        "R_ID": rot(E_est.T_ID.rotation, E_true.T_ID.rotation),
        "R_DC": rot(E_est.T_DC.rotation, E_true.T_DC.rotation),
        "p_ID": float(np.linalg.norm(E_est.T_ID.translation - E_true.T_ID.translation)),
        "p_DC": float(np.linalg.norm(E_est.T_DC.translation - E_true.T_DC.translation)),
    }
