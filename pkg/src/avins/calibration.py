"""Extrinsic and DVL transducer calibration.

Extrinsic pipeline (run strictly in order):

1. vision-only bundle adjustment; the camera poses and landmarks are held
   fixed afterwards,
2. extrinsic initialization from DVL translation and IMU rotation
   residuals with the gyro bias at zero,
3. the same residuals with the gyro bias freed,
4. closed-form gravity initialization refined over ``R_WI0`` together with
   the IMU-DVL lever arm,
5. full refinement of extrinsics, gravity, biases and velocities, using the
   linearized DVL increment while the ``R_ID`` update stays small.

Misalignment pipeline: bundle adjustment, DVL-frame velocity knots
(a uniform grid interpolated cubically, or one per DVL sample) estimated
against the camera trajectory, then the eight beam angles fitted to the raw
beam readings.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dvl import (
    TransducerGeometry,
    body_velocity_covariance,
    projection_derivatives,
    projection_vectors,
    solve_body_velocities,
)
from .errors import (
    AvinsError,
    DegenerateMotion,
    InsufficientExcitation,
    InsufficientParallax,
    TooFewObservations,
)
from .factors import (
    EXTRINSIC_KEYS,
    BodyVelocity,
    CameraModel,
    DvlTranslationFactor,
    DvlVelocityFactor,
    ExtrinsicSet,
    GravityModel,
    ImuFactor,
    KeyframeState,
    ProjectionFactors,
    SegmentVelocityFactor,
    dvl_translation_model,
    _extrinsics,
    _stack,
)
from .geometry import RigidTransform, exp_so3, log_so3, normalize_rotation
from .optimizer import (
    BIAS,
    EXTRINSIC_ROTATION,
    EXTRINSIC_TRANSLATION,
    GRAVITY_ROTATION,
    LANDMARK,
    POSE,
    VELOCITY,
    FactorGraphProblem,
    PriorFactor,
    marginal_covariance,
    SolveReport,
    SolverSettings,
    solve,
)
from .preintegration import (
    SIGMA_V,
    ImuBias,
    ImuNoise,
    ImuStream,
    build_steps,
    dvl_step_weights,
    integrate_dvl,
    interpolation_weights,
    relative_rotation_increment,
    preintegrate_imu,
)
from .simulator import CameraFrame, SyntheticDataset

logger = logging.getLogger(__name__)

ACCEL_PIN = 1e4  # weight that holds the accelerometer bias while only the gyro bias is estimated


class ExtrinsicStage(IntEnum):
    VISION_BA = 0
    EXTRINSIC_INIT = 1
    EXTRINSIC_BIAS_REFINE = 2
    GRAVITY_INIT = 3
    FULL_REFINE = 4


class MisalignmentStage(IntEnum):
    VISION_BA = 0
    BODY_VELOCITY_OPT = 1
    TRANSDUCER_OPT = 2


@dataclass
class CalibrationSettings:
    solver: SolverSettings = field(default_factory=lambda: SolverSettings(max_iterations=100))
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    sigma_d: float = 0.01
    pixel_sigma: float = 1.0
    bias_mode: str = "shared"  # or "per_keyframe"
    approximate: bool = True
    # Tighter than the factor default: the linear DVL model error grows as drift^2 and the
    # refined extrinsics must agree with the exact solve to 1e-5.
    sigma_phi: float = 1e-3
    sigma_v: float = SIGMA_V
    dvl_hold: str = "cubic"
    min_keyframes: int = 10
    max_keyframes: int = 100
    gravity: float = 9.81
    min_rotation_rate: float = 0.01  # rad/s rms on the second gyro axis
    min_velocity: float = 0.01  # m/s rms on the third velocity axis
    segment_sigma: float = 1e-3  # m, weight of the misalignment velocity factors
    pose_uncertainty: bool = True  # propagate bundle-adjustment pose covariance into factor weights
    knot_spacing: Optional[float] = 0.5  # s; None places knots at the DVL sample times

    def __post_init__(self):
        if self.bias_mode not in ("shared", "per_keyframe"):
            raise ValueError(f"unknown bias mode {self.bias_mode!r}")


@dataclass
class CalibrationData:
    """Keyframe buffer and raw streams used by a calibration session."""

    times: np.ndarray
    frames: List[CameraFrame]
    imu: ImuStream
    dvl_t: np.ndarray
    dvl_beams: np.ndarray
    camera: CameraModel

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        if len(self.times) != len(self.frames):
            raise ValueError("one camera frame per keyframe is required")

    @property
    def n_keyframes(self) -> int:
        return len(self.times)

    @classmethod
    def from_dataset(cls, ds: SyntheticDataset, n_keyframes: int = 100, stride: int = 1,
                     start: int = 0) -> "CalibrationData":
        idx = np.arange(start, len(ds.frames), stride)[:n_keyframes]
        frames = [ds.frames[i] for i in idx]
        return cls(np.array([f.t for f in frames]), frames, ds.imu, ds.dvl_t, ds.dvl_beams, ds.rig.camera)


# ---------------------------------------------------------------------------
# Vision-only bundle adjustment


def stereo_triangulate(meas: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Points in the camera frame from (u, v, u_right) observations."""
    meas = np.asarray(meas, float).reshape(-1, 3)
    disp = meas[:, 0] - meas[:, 2]
    if np.any(disp <= 0):
        raise InsufficientParallax("non-positive stereo disparity")
    z = cam.fx * cam.baseline / disp
    return np.column_stack([(meas[:, 0] - cam.cx) * z / cam.fx, (meas[:, 1] - cam.cy) * z / cam.fy, z])


def kabsch(P: np.ndarray, Q: np.ndarray, weights: Optional[np.ndarray] = None) -> RigidTransform:
    """Rigid transform T minimizing sum w |Q - T(P)|^2."""
    w = np.ones(len(P)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    cp, cq = w @ P, w @ Q
    X, Y = (P - cp) * np.sqrt(w)[:, None], (Q - cq) * np.sqrt(w)[:, None]
    sv = np.linalg.svd(X, compute_uv=False)
    if len(P) < 3 or sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise InsufficientParallax("co-observed points are degenerate")
    U, _, Vt = np.linalg.svd(Y.T @ X)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return RigidTransform(R, cq - R @ cp)


def _track_pose(guess: RigidTransform, frame: CameraFrame, landmarks: Dict[int, np.ndarray],
                cam: CameraModel, pixel_sigma: float) -> RigidTransform:
    """Motion-only refinement of one camera pose against mapped landmarks."""
    known = [m for m, i in enumerate(frame.ids) if int(i) in landmarks]
    if len(known) < 3:
        return guess
    pb = FactorGraphProblem(SolverSettings(max_iterations=20, check_gauge=False))
    pb.add_variable("T", POSE, guess)
    for m in known:
        pb.add_variable(("l", int(frame.ids[m])), LANDMARK, landmarks[int(frame.ids[m])], fixed=True)
    pb.add_factor(ProjectionFactors(["T"] * len(known), [("l", int(frame.ids[m])) for m in known],
                                    frame.meas[known], cam, pixel_sigma, huber=3.0))
    try:
        values, _ = solve(pb)
    except AvinsError:
        return guess
    return values["T"]


@dataclass
class BundleResult:
    poses: List[RigidTransform]
    landmarks: Dict[int, np.ndarray]
    report: SolveReport
    pose_covariance: Optional[np.ndarray] = None  # (6N, 6N), tangent order (rotation, translation)

    def relative_covariance(self, i: int, j: int) -> np.ndarray:
        """Joint 12x12 covariance of poses i and j."""
        idx = np.r_[6 * i:6 * i + 6, 6 * j:6 * j + 6]
        return self.pose_covariance[np.ix_(idx, idx)]


def _bundle(frames: Sequence[CameraFrame], poses: List[RigidTransform], landmarks: Dict[int, np.ndarray],
            cam: CameraModel, pixel_sigma: float, settings: SolverSettings, covariance: bool = False):
    pb = FactorGraphProblem(settings)
    for k, T in enumerate(poses):
        pb.add_variable(("T", k), POSE, T, fixed=(k == 0))
    for lid, X in landmarks.items():
        pb.add_variable(("l", lid), LANDMARK, X)
    pk = [("T", k) for k, f in enumerate(frames) for _ in f.ids]
    lk = [("l", int(i)) for f in frames for i in f.ids]
    meas = np.vstack([f.meas for f in frames if len(f.ids)])
    pb.add_factor(ProjectionFactors(pk, lk, meas, cam, pixel_sigma))
    values, report = solve(pb)
    cov = None
    if covariance:
        n = len(poses)
        cov = np.zeros((6 * n, 6 * n))
        cov[6:, 6:] = marginal_covariance(pb, [("T", k) for k in range(1, n)])
    return ([values[("T", k)] for k in range(len(poses))],
            {lid: np.asarray(values[("l", lid)]) for lid in landmarks}, report, cov)


def vision_only_ba(frames: Sequence[CameraFrame], cam: CameraModel, pixel_sigma: float = 1.0,
                   settings: Optional[SolverSettings] = None, min_common: int = 3,
                   rebundle_every: int = 10) -> BundleResult:
    """Stereo bundle adjustment with the first pose as gauge.

    Poses are initialized by frame-to-frame tracking against a fused stereo
    map, with a global bundle adjustment every ``rebundle_every`` frames so
    odometry drift never grows large before the final solve.
    """
    if len(frames) < 2:
        raise TooFewObservations(f"need at least 2 keyframes, got {len(frames)}")
    settings = settings or SolverSettings(max_iterations=100, cost_tolerance=1e-14)
    interim = SolverSettings(max_iterations=10, cost_tolerance=1e-6)
    pts = [stereo_triangulate(f.meas, cam) if len(f.ids) else np.zeros((0, 3)) for f in frames]
    poses = [RigidTransform.identity()]
    # Landmark map fused from stereo points with weights 1/z^4 (depth variance).
    acc: Dict[int, np.ndarray] = {}
    wsum: Dict[int, float] = {}

    def fuse(T: RigidTransform, f: CameraFrame, X: np.ndarray) -> None:
        for lid, x in zip(f.ids, X):
            lid, w = int(lid), 1.0 / x[2] ** 4
            acc[lid] = acc.get(lid, 0.0) + w * T.apply(x)
            wsum[lid] = wsum.get(lid, 0.0) + w

    def current_map() -> Dict[int, np.ndarray]:
        return {i: acc[i] / wsum[i] for i in acc}

    fuse(poses[0], frames[0], pts[0])
    for k in range(1, len(frames)):
        common, ia, ib = np.intersect1d(frames[k - 1].ids, frames[k].ids, return_indices=True)
        if len(common) < min_common:
            raise TooFewObservations(f"keyframes {k - 1} and {k} share {len(common)} landmarks")
        w = 1.0 / (pts[k][ib, 2] ** 4 + pts[k - 1][ia, 2] ** 4)
        guess = poses[-1].compose(kabsch(pts[k][ib], pts[k - 1][ia], w))
        T = _track_pose(guess, frames[k], current_map(), cam, pixel_sigma)
        poses.append(T)
        fuse(T, frames[k], pts[k])
        if rebundle_every and k % rebundle_every == 0 and k + 1 < len(frames):
            poses, lms, _, _ = _bundle(frames[:k + 1], poses, current_map(), cam, pixel_sigma, interim)
            for i, X in lms.items():
                acc[i] = wsum[i] * X
    poses, landmarks, report, cov = _bundle(frames, poses, current_map(), cam, pixel_sigma, settings, True)
    return BundleResult(poses, landmarks, report, cov)


# ---------------------------------------------------------------------------
# Shared helpers


@dataclass
class _Interval:
    steps: object
    dvl_idx: np.ndarray
    weights: np.ndarray


def _dvl_velocities(data: CalibrationData, geometry: TransducerGeometry) -> np.ndarray:
    return solve_body_velocities(data.dvl_beams, projection_vectors(geometry))


def _keyframe_velocities(data: CalibrationData, v_dvl: np.ndarray) -> np.ndarray:
    W = interpolation_weights(data.times, data.dvl_t, cubic=True)
    return W @ v_dvl


def check_excitation(data: CalibrationData, geometry: TransducerGeometry,
                     settings: Optional[CalibrationSettings] = None) -> dict:
    """Rank checks on gyro rates and DVL velocities inside the buffer.

    Raises InsufficientExcitation when fewer than two rotation axes or
    fewer than three velocity directions are excited.
    """
    s = settings or CalibrationSettings()
    t0, t1 = data.times[0], data.times[-1]
    sel = (data.imu.t >= t0) & (data.imu.t <= t1)
    om = data.imu.omega[sel]
    om = om - om.mean(axis=0)  # a constant rate includes the unknown bias
    rot_sv = np.linalg.svd(om, compute_uv=False) / np.sqrt(max(len(om), 1))
    dsel = (data.dvl_t >= t0) & (data.dvl_t <= t1)
    v = _dvl_velocities(data, geometry)[dsel]
    vel_sv = np.linalg.svd(v, compute_uv=False) / np.sqrt(max(len(v), 1)) if len(v) >= 3 else np.zeros(3)
    info = {"rotation_singular_values": rot_sv.tolist(), "velocity_singular_values": vel_sv.tolist()}
    if len(rot_sv) < 2 or rot_sv[1] < s.min_rotation_rate:
        raise InsufficientExcitation(f"rotation excites fewer than 2 axes: {rot_sv}")
    if len(vel_sv) < 3 or vel_sv[2] < s.min_velocity:
        raise InsufficientExcitation(f"velocity spans fewer than 3 directions: {vel_sv}")
    return info


def extrinsic_errors(E: ExtrinsicSet, E_true: ExtrinsicSet) -> dict:
    """Rotation (rad) and translation (m) errors, plus gravity tilt (rad)."""
    def rot(a, b):
        return float(np.linalg.norm(log_so3(a.T @ b)))

    g = np.array([0.0, 0.0, -1.0])
    tilt = np.arccos(np.clip((E.R_WI0.T @ g) @ (E_true.R_WI0.T @ g), -1.0, 1.0))
    return {
        "R_ID": rot(E.T_ID.rotation, E_true.T_ID.rotation),
        "R_DC": rot(E.T_DC.rotation, E_true.T_DC.rotation),
        "R_IC": rot(E.R_IC, E_true.R_IC),
        "p_ID": float(np.linalg.norm(E.T_ID.translation - E_true.T_ID.translation)),
        "p_DC": float(np.linalg.norm(E.T_DC.translation - E_true.T_DC.translation)),
        "gravity_tilt": float(tilt),
    }


def gravity_alignment(g_body: np.ndarray) -> np.ndarray:
    """Minimal rotation R_WI0 mapping the measured gravity direction onto -z."""
    a = np.asarray(g_body, float) / np.linalg.norm(g_body)
    b = np.array([0.0, 0.0, -1.0])
    axis = np.cross(a, b)
    s, c = np.linalg.norm(axis), float(a @ b)
    if s < 1e-12:
        return np.eye(3) if c > 0 else exp_so3([np.pi, 0.0, 0.0])
    return exp_so3(axis / s * np.arctan2(s, c))


# ---------------------------------------------------------------------------
# Extrinsic session


@dataclass
class StageRecord:
    stage: str
    report: Optional[SolveReport]
    extrinsics: ExtrinsicSet
    wall_time: float
    extra: dict = field(default_factory=dict)


class CalibrationSession:
    """Coarse-to-fine extrinsic calibration over a keyframe buffer."""

    def __init__(self, data: CalibrationData, settings: Optional[CalibrationSettings] = None,
                 initial: Optional[ExtrinsicSet] = None, geometry: Optional[TransducerGeometry] = None):
        self.settings = settings or CalibrationSettings()
        s = self.settings
        if data.n_keyframes < s.min_keyframes:
            raise TooFewObservations(f"need {s.min_keyframes} keyframes, got {data.n_keyframes}")
        if data.n_keyframes > s.max_keyframes:
            raise TooFewObservations(f"buffer holds at most {s.max_keyframes} keyframes")
        self.data = data
        self.geometry = geometry or TransducerGeometry.nominal()
        self.extrinsics = initial or ExtrinsicSet()
        self.stage: Optional[ExtrinsicStage] = None
        self.records: List[StageRecord] = []
        self.poses: List[RigidTransform] = []
        self.landmarks: Dict[int, np.ndarray] = {}
        self.bundle: Optional[BundleResult] = None
        n_bias = 1 if s.bias_mode == "shared" else data.n_keyframes - 1
        self.biases = np.zeros((n_bias, 6))
        self.v_dvl = _dvl_velocities(data, self.geometry)
        self.velocities = _keyframe_velocities(data, self.v_dvl)
        self.velocity_cov = body_velocity_covariance(projection_vectors(self.geometry), s.sigma_d)
        self.gravity = GravityModel(s.gravity)
        self.intervals = self._build_intervals()
        self._pre_cache: Dict[tuple, tuple] = {}

    # bookkeeping -----------------------------------------------------------
    def _build_intervals(self) -> List[_Interval]:
        out = []
        d = self.data
        for i in range(d.n_keyframes - 1):
            steps = build_steps(d.imu, d.times[i], d.times[i + 1], hold="linear", extra_cuts=d.dvl_t)
            idx, W = dvl_step_weights(steps.t, d.dvl_t, self.settings.dvl_hold)
            out.append(_Interval(steps, idx, W))
        return out

    def _advance(self, stage: ExtrinsicStage) -> None:
        expected = ExtrinsicStage(0) if self.stage is None else self.stage + 1
        if stage != expected:
            raise RuntimeError(f"stage {stage.name} requested, next stage is {ExtrinsicStage(expected).name}")

    def _record(self, stage: ExtrinsicStage, report, t0: float, **extra) -> None:
        self.stage = stage
        self.records.append(StageRecord(stage.name, report, self.extrinsics, time.perf_counter() - t0, extra))
        logger.info("calibration stage %s done", stage.name)

    def bias_key(self, i: int):
        return ("b", 0 if self.settings.bias_mode == "shared" else i)

    def bias(self, i: int) -> ImuBias:
        return ImuBias.from_vector(self.biases[0 if self.settings.bias_mode == "shared" else i])

    def preintegrate(self, i: int, with_noise: bool = True):
        """IMU and DVL increments of interval i at the current bias and R_ID."""
        iv = self.intervals[i]
        bias = self.bias(i)
        R_ID = self.extrinsics.T_ID.rotation
        key = (i, bias.vector().tobytes(), R_ID.tobytes(), with_noise)
        if key not in self._pre_cache:
            noise = self.settings.imu_noise if with_noise else ImuNoise(0.0, 0.0, 0.0, 0.0)
            pre = preintegrate_imu(iv.steps, bias, noise)
            pd = integrate_dvl(pre.gyro, self.v_dvl[iv.dvl_idx], R_ID, iv.weights,
                               velocity_cov=self.velocity_cov, gyro_density=noise.gyro_density)
            self._pre_cache[key] = (pre, pd)
        return self._pre_cache[key]

    def _problem(self, free: Sequence[str]) -> FactorGraphProblem:
        pb = FactorGraphProblem(self.settings.solver)
        for k, T in enumerate(self.poses):
            pb.add_variable(("T", k), POSE, T, fixed=True)
        E = self.extrinsics
        kinds = {
            "R_ID": (EXTRINSIC_ROTATION, E.T_ID.rotation),
            "p_ID": (EXTRINSIC_TRANSLATION, E.T_ID.translation),
            "R_DC": (EXTRINSIC_ROTATION, E.T_DC.rotation),
            "p_DC": (EXTRINSIC_TRANSLATION, E.T_DC.translation),
            "R_WI0": (GRAVITY_ROTATION, E.R_WI0),
        }
        for name, (kind, val) in kinds.items():
            pb.add_variable(name, kind, np.array(val, float), fixed=name not in free)
        return pb

    def _add_biases(self, pb: FactorGraphProblem, gyro_only: bool) -> None:
        for b in range(len(self.biases)):
            key = ("b", b)
            pb.add_variable(key, BIAS, self.biases[b].copy())
            if gyro_only:
                S = np.hstack([np.zeros((3, 3)), ACCEL_PIN * np.eye(3)])
                pb.add_factor(PriorFactor([key], [BIAS], [self.biases[b].copy()], S))

    def _store(self, values: dict) -> None:
        self.extrinsics = _extrinsics(values, EXTRINSIC_KEYS)
        for b in range(len(self.biases)):
            if ("b", b) in values:
                self.biases[b] = values[("b", b)]
        for k in range(self.data.n_keyframes):
            if ("v", k) in values:
                self.velocities[k] = values[("v", k)]

    def _add(self, pb: FactorGraphProblem, factor, i: int) -> None:
        """Add a factor between keyframes i and i+1, inflating it by the pose covariance."""
        pb.add_factor(factor)
        if not self.settings.pose_uncertainty or self.bundle is None or self.bundle.pose_covariance is None:
            return
        J = pose_jacobian(factor, pb.values)
        factor.set_extra_covariance(J @ self.bundle.relative_covariance(i, i + 1) @ J.T)

    # stages ---------------------------------------------------------------------
    def vision_ba(self) -> BundleResult:
        self._advance(ExtrinsicStage.VISION_BA)
        t0 = time.perf_counter()
        res = vision_only_ba(self.data.frames, self.data.camera, self.settings.pixel_sigma)
        self.bundle = res
        self.poses, self.landmarks = res.poses, res.landmarks
        self._record(ExtrinsicStage.VISION_BA, res.report, t0)
        return res

    def extrinsic_init(self) -> ExtrinsicSet:
        """DVL translation + IMU rotation over R_ID, R_DC, p_DC with zero gyro bias."""
        self._advance(ExtrinsicStage.EXTRINSIC_INIT)
        t0 = time.perf_counter()
        pb = self._problem(["R_ID", "R_DC", "p_DC"])
        for i in range(len(self.intervals)):
            pre, pd = self.preintegrate(i)
            self._add(pb, ImuFactor(("T", i), ("T", i + 1), None, None, None, pre, components=("rot",),
                                    gravity=self.gravity), i)
            self._add(pb, DvlTranslationFactor(("T", i), ("T", i + 1), None, pd, approximate=False), i)
        values, report = solve(pb)
        self._store(values)
        self._record(ExtrinsicStage.EXTRINSIC_INIT, report, t0)
        return self.extrinsics

    def extrinsic_refine_with_bias(self) -> tuple[ExtrinsicSet, np.ndarray]:
        """Same residuals with the gyro bias estimated."""
        self._advance(ExtrinsicStage.EXTRINSIC_BIAS_REFINE)
        t0 = time.perf_counter()
        pb = self._problem(["R_ID", "R_DC", "p_DC"])
        self._add_biases(pb, gyro_only=True)
        for i in range(len(self.intervals)):
            pre, pd = self.preintegrate(i)
            bk = self.bias_key(i)
            self._add(pb, ImuFactor(("T", i), ("T", i + 1), None, None, bk, pre, components=("rot",),
                                    gravity=self.gravity), i)
            self._add(pb, DvlTranslationFactor(("T", i), ("T", i + 1), bk, pd, approximate=False), i)
        values, report = solve(pb)
        self._store(values)
        self._record(ExtrinsicStage.EXTRINSIC_BIAS_REFINE, report, t0)
        return self.extrinsics, self.biases[:, :3].copy()

    def gravity_closed_form(self) -> np.ndarray:
        """Gravity direction in I0 from the IMU velocity model, as R_WI0."""
        E = self.extrinsics
        A, a = E.T_ID.rotation, E.T_ID.translation
        C = E.R_IC
        acc = np.zeros(3)
        total = 0.0
        for i in range(len(self.intervals)):
            pre, _ = self.preintegrate(i, with_noise=False)
            Ri, Rj = self.poses[i].rotation, self.poses[i + 1].rotation
            bg = self.bias(i).gyro
            P = C @ Ri.T @ Rj @ C.T
            ui = A @ self.velocities[i] - np.cross(pre.steps.omega_start - bg, a)
            uj = A @ self.velocities[i + 1] - np.cross(pre.steps.omega_end - bg, a)
            acc += C @ Ri @ C.T @ (P @ uj - ui - pre.delta_v)
            total += pre.dt_total
        if total <= 0:
            raise InsufficientExcitation("empty calibration window")
        g_body = acc / total
        mag = float(np.linalg.norm(g_body))
        if not 0.5 * self.gravity.g < mag < 1.5 * self.gravity.g:
            raise InsufficientExcitation(
                f"specific force inconsistent with gravity ({mag:.3f} m/s^2); accelerometer not excited by g"
            )
        # g_body approximates R_WI0^T g_w.
        return gravity_alignment(g_body)

    def gravity_init(self) -> np.ndarray:
        """Closed-form R_WI0 refined over its two observable angles.

        The IMU-DVL lever arm ``p_ID`` is refined alongside: the velocity
        residual depends on it through ``omega x p_ID`` and no earlier stage
        observes it, so holding it at the initial guess would tilt gravity.
        """
        self._advance(ExtrinsicStage.GRAVITY_INIT)
        t0 = time.perf_counter()
        G0 = self.gravity_closed_form()
        self.extrinsics = replace(self.extrinsics, R_WI0=G0)
        pb = self._problem(["R_WI0", "p_ID"])
        self._add_biases(pb, gyro_only=False)
        for b in range(len(self.biases)):
            pb.set_fixed(("b", b))
        for k in range(self.data.n_keyframes):
            pb.add_variable(("v", k), VELOCITY, self.velocities[k].copy(), fixed=True)
        for i in range(len(self.intervals)):
            pre, _ = self.preintegrate(i)
            self._add(pb, ImuFactor(("T", i), ("T", i + 1), ("v", i), ("v", i + 1), self.bias_key(i), pre,
                                    components=("rot", "vel"), gravity=self.gravity), i)
        values, report = solve(pb)
        self._store(values)
        self._record(ExtrinsicStage.GRAVITY_INIT, report, t0, closed_form=G0.tolist())
        return self.extrinsics.R_WI0

    def build_full_problem(self, approximate: bool) -> FactorGraphProblem:
        pb = self._problem(["R_ID", "p_ID", "R_DC", "p_DC", "R_WI0"])
        self._add_biases(pb, gyro_only=False)
        for k in range(self.data.n_keyframes):
            pb.add_variable(("v", k), VELOCITY, self.velocities[k].copy())
        W = interpolation_weights(self.data.times, self.data.dvl_t, cubic=True)
        for k in range(self.data.n_keyframes):
            pb.add_factor(DvlVelocityFactor(("v", k), BodyVelocity(W[k] @ self.v_dvl, self.velocity_cov)))
        for i in range(len(self.intervals)):
            pre, pd = self.preintegrate(i)
            bk = self.bias_key(i)
            self._add(pb, ImuFactor(("T", i), ("T", i + 1), ("v", i), ("v", i + 1), bk, pre,
                                    gravity=self.gravity), i)
            self._add(pb, DvlTranslationFactor(("T", i), ("T", i + 1), bk, pd, approximate=approximate,
                                               sigma_phi=self.settings.sigma_phi), i)
        return pb

    def full_refine(self, approximate: Optional[bool] = None) -> ExtrinsicSet:
        """Joint refinement of extrinsics, gravity, velocities and biases."""
        self._advance(ExtrinsicStage.FULL_REFINE)
        approximate = self.settings.approximate if approximate is None else approximate
        t0 = time.perf_counter()
        pb = self.build_full_problem(approximate)
        values, report = solve(pb)
        drift = max((float(np.linalg.norm(relative_rotation_increment(values["R_ID"], f.pre.extrinsic_lin)))
                     for f in pb.factors if isinstance(f, DvlTranslationFactor)), default=0.0)
        reints = sum(getattr(f, "reintegrations", 0) for f in pb.factors if isinstance(f, DvlTranslationFactor))
        self._store(values)
        self._record(ExtrinsicStage.FULL_REFINE, report, t0, approx_hits=report.approx_hits,
                     dvl_reintegrations=reints, linearization_drift=drift)
        return self.extrinsics

    def run(self, check_observability: bool = True) -> ExtrinsicSet:
        """All five stages in order."""
        if check_observability:
            check_excitation(self.data, self.geometry, self.settings)
        self.vision_ba()
        self.extrinsic_init()
        self.extrinsic_refine_with_bias()
        self.gravity_init()
        self.full_refine()
        return self.extrinsics

    def report(self) -> dict:
        out = {"stages": [], "extrinsics": self.extrinsics.to_dict(), "biases": self.biases.tolist()}
        for r in self.records:
            entry = {"stage": r.stage, "wall_time": r.wall_time, **r.extra,
                     "extrinsics": r.extrinsics.to_dict()}
            if r.report is not None:
                entry.update(iterations=r.report.iterations, initial_cost=r.report.initial_cost,
                             final_cost=r.report.final_cost, reason=r.report.reason,
                             approx_hits=r.report.approx_hits, cost_breakdown=r.report.cost_breakdown)
            out["stages"].append(entry)
        return out


def pose_jacobian(factor, values: dict) -> np.ndarray:
    """Unwhitened residual Jacobian w.r.t. (pose_i, pose_j) of an IMU or DVL translation factor."""
    if isinstance(factor, ImuFactor):
        _, Js = factor.raw(values)
        rows = [3] * len(Js)
        return np.hstack([_stack(Js, ["R_i", "p_i"], rows), _stack(Js, ["R_j", "p_j"], rows)])
    _, J = factor.raw(values)
    return np.hstack([J["R_i"], J["p_i"], J["R_j"], J["p_j"]])


# Module-level stage functions operate on a session.

def extrinsic_init(session: CalibrationSession) -> ExtrinsicSet:
    return session.extrinsic_init()


def extrinsic_refine_with_bias(session: CalibrationSession):
    return session.extrinsic_refine_with_bias()


def gravity_init(session: CalibrationSession) -> np.ndarray:
    return session.gravity_init()


def full_refine(session: CalibrationSession, approximate: Optional[bool] = None) -> ExtrinsicSet:
    return session.full_refine(approximate)


@dataclass
class JointResult:
    extrinsics: ExtrinsicSet
    report: Optional[SolveReport]
    failed: bool
    message: str = ""


def joint_one_shot(data: CalibrationData, settings: Optional[CalibrationSettings] = None,
                   initial: Optional[ExtrinsicSet] = None, geometry: Optional[TransducerGeometry] = None,
                   bundle: Optional[BundleResult] = None) -> JointResult:
    """Ablation: the full refinement problem solved directly from the initial guess."""
    session = CalibrationSession(data, settings, initial, geometry)
    if bundle is None:
        session.vision_ba()
    else:
        session.bundle = bundle
        session.poses, session.landmarks = bundle.poses, bundle.landmarks
    try:
        pb = session.build_full_problem(approximate=False)
        values, report = solve(pb)
    except AvinsError as exc:
        return JointResult(session.extrinsics, None, True, str(exc))
    return JointResult(_extrinsics(values, EXTRINSIC_KEYS), report, False, report.reason)


# ---------------------------------------------------------------------------
# DVL transducer misalignment


@dataclass
class MisalignmentEstimate:
    geometry: TransducerGeometry
    confidence: np.ndarray  # (8,) 1-sigma in radians, ordered as TransducerGeometry.as_vector
    residual_rms: float
    iterations: int

    def to_dict(self) -> dict:
        return {**self.geometry.to_dict(), "confidence_deg": np.rad2deg(self.confidence).tolist(),
                "residual_rms": self.residual_rms, "iterations": self.iterations}


@dataclass
class VelocityKnots:
    """DVL-frame velocity knots and their values at the DVL sample times."""

    t: np.ndarray  # (K,) knot times
    v: np.ndarray  # (K, 3)
    sample_index: np.ndarray  # DVL samples inside the keyframe span
    sample_v: np.ndarray  # (M, 3) cubic interpolation of the knots at those samples
    report: Optional[SolveReport] = None


class MisalignmentSession:
    """Three-stage transducer angle calibration with known extrinsics."""

    def __init__(self, data: CalibrationData, extrinsics: ExtrinsicSet,
                 settings: Optional[CalibrationSettings] = None, nominal: Optional[TransducerGeometry] = None,
                 bias: Optional[ImuBias] = None):
        self.settings = settings or CalibrationSettings()
        if data.n_keyframes < self.settings.min_keyframes:
            raise TooFewObservations(f"need {self.settings.min_keyframes} keyframes, got {data.n_keyframes}")
        self.data = data
        self.extrinsics = extrinsics
        self.nominal = nominal or TransducerGeometry.nominal()
        self.bias = bias or ImuBias()
        self.stage: Optional[MisalignmentStage] = None
        self.poses: List[RigidTransform] = []
        self.knots: Optional[VelocityKnots] = None
        self.estimate: Optional[MisalignmentEstimate] = None
        self.reports: Dict[str, object] = {}

    def _advance(self, stage: MisalignmentStage) -> None:
        expected = MisalignmentStage(0) if self.stage is None else self.stage + 1
        if stage != expected:
            raise RuntimeError(f"stage {stage.name} requested, next stage is {MisalignmentStage(expected).name}")

    def vision_ba(self) -> BundleResult:
        self._advance(MisalignmentStage.VISION_BA)
        res = vision_only_ba(self.data.frames, self.data.camera, self.settings.pixel_sigma)
        self.poses = res.poses
        self.reports["vision_ba"] = res.report
        self.stage = MisalignmentStage.VISION_BA
        return res

    def body_velocity_opt(self, approximate: Optional[bool] = None) -> VelocityKnots:
        self._advance(MisalignmentStage.BODY_VELOCITY_OPT)
        self.knots = misalignment_body_velocity_opt(self, approximate)
        self.stage = MisalignmentStage.BODY_VELOCITY_OPT
        return self.knots

    def transducer_opt(self) -> MisalignmentEstimate:
        self._advance(MisalignmentStage.TRANSDUCER_OPT)
        self.estimate = misalignment_transducer_opt(self, self.knots)
        self.stage = MisalignmentStage.TRANSDUCER_OPT
        return self.estimate

    def run(self) -> MisalignmentEstimate:
        self.vision_ba()
        self.body_velocity_opt()
        return self.transducer_opt()


def knot_grid(t0: float, t1: float, spacing: float) -> np.ndarray:
    """Uniform knot times covering [t0, t1] with one knot beyond each end."""
    n = int(np.ceil((t1 - t0) / spacing - 1e-9))
    return t0 + spacing * np.arange(-1, n + 2)


def misalignment_body_velocity_opt(session: MisalignmentSession, approximate: Optional[bool] = None) -> VelocityKnots:
    """DVL-frame velocity knots that reproduce the camera-derived DVL translations.

    Each keyframe interval contributes ``h_Dt - sum_k dR_ik R_ID v(t_k) dt_k``,
    where ``v(t)`` is the cubic interpolant of the unknown knots. Knots sit
    on a uniform grid (``knot_spacing``) or at the DVL sample times when the
    spacing is ``None``. The initial guess solves the beams with the nominal
    geometry.
    """
    s = session.settings
    approximate = s.approximate if approximate is None else approximate
    d = session.data
    E = session.extrinsics
    v_meas = _dvl_velocities(d, session.nominal)
    t0, t1 = d.times[0], d.times[-1]
    if s.knot_spacing is None:
        knots = d.dvl_t[(d.dvl_t >= t0 - 0.5) & (d.dvl_t <= t1 + 0.5)]
    else:
        knots = knot_grid(t0, t1, s.knot_spacing)
    v_init = interpolation_weights(knots, d.dvl_t, cubic=True) @ v_meas
    pb = FactorGraphProblem(s.solver)
    used = set()
    factors = []
    for i in range(d.n_keyframes - 1):
        steps = build_steps(d.imu, d.times[i], d.times[i + 1], hold="linear", extra_cuts=knots)
        idx, W = dvl_step_weights(steps.t, knots, "cubic")
        pre = preintegrate_imu(steps, session.bias)
        pd = integrate_dvl(pre.gyro, v_init[idx], E.T_ID.rotation, W)
        si = KeyframeState(session.poses[i].rotation, session.poses[i].translation)
        sj = KeyframeState(session.poses[i + 1].rotation, session.poses[i + 1].translation)
        h, _ = dvl_translation_model(si, sj, E)
        factors.append(SegmentVelocityFactor([("u", int(m)) for m in idx], pd, h, s.segment_sigma,
                                             approximate=approximate, sigma_v=s.sigma_v))
        used.update(int(m) for m in idx)
    index = np.array(sorted(used), dtype=int)
    for m in index:
        pb.add_variable(("u", int(m)), VELOCITY, v_init[m].copy())
    for f in factors:
        pb.add_factor(f)
    values, report = solve(pb)
    kt = knots[index]
    kv = np.array([values[("u", int(m))] for m in index])
    sel = np.flatnonzero((d.dvl_t >= t0 - 1e-9) & (d.dvl_t <= t1 + 1e-9))
    sample_v = interpolation_weights(d.dvl_t[sel], kt, cubic=True) @ kv
    return VelocityKnots(kt, kv, sel, sample_v, report)


def misalignment_transducer_opt(session: MisalignmentSession, knots: VelocityKnots,
                                max_iterations: int = 50, tol: float = 1e-12,
                                margin: float = 1e-4) -> MisalignmentEstimate:
    """Fit the eight beam angles to the raw readings given knot velocities.

    Gauss-Newton per beam with the angles projected into (0, pi/2) after
    every step.
    """
    V = np.asarray(knots.sample_v, float)
    if len(V) < 3:
        raise DegenerateMotion("fewer than 3 velocity samples")
    sv = np.linalg.svd(V, compute_uv=False)
    if sv[2] < 1e-3 * sv[0] or sv[2] < 1e-9:
        raise DegenerateMotion(f"velocity samples span fewer than 3 dimensions (singular values {sv})")
    y = session.data.dvl_beams[knots.sample_index]  # (M, 4)
    geom = session.nominal
    lo, hi = margin, 0.5 * np.pi - margin
    x = geom.as_vector().reshape(4, 2).copy()
    it_used = 0
    for it in range(max_iterations):
        g = TransducerGeometry(x[:, 0], x[:, 1])
        E = projection_vectors(g)
        dA, dB = projection_derivatives(g)
        r = y - V @ E.T  # (M, 4)
        max_step = 0.0
        for n in range(4):
            J = np.column_stack([V @ dA[n], V @ dB[n]])
            step, *_ = np.linalg.lstsq(J, r[:, n], rcond=None)
            x[n] = np.clip(x[n] + step, lo, hi)
            max_step = max(max_step, float(np.abs(step).max()))
        it_used = it + 1
        if max_step < tol:
            break
    g = TransducerGeometry(x[:, 0], x[:, 1])
    E = projection_vectors(g)
    dA, dB = projection_derivatives(g)
    r = y - V @ E.T
    conf = np.zeros((4, 2))
    dof = max(len(V) - 2, 1)
    for n in range(4):
        J = np.column_stack([V @ dA[n], V @ dB[n]])
        s2 = float(r[:, n] @ r[:, n]) / dof
        conf[n] = np.sqrt(np.clip(np.diag(np.linalg.pinv(J.T @ J)) * s2, 0.0, None))
    return MisalignmentEstimate(g, conf.reshape(8), float(np.sqrt(np.mean(r * r))), it_used)
