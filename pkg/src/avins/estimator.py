"""Sliding-window acoustic-visual-inertial estimator.

Each keyframe carries a camera pose in C0, a DVL-frame velocity and an IMU
bias. Consecutive keyframes are linked by IMU and DVL translation factors,
every keyframe gets a DVL velocity factor, and stereo landmark observations
add reprojection factors. When a keyframe has no camera observations the
window is solved from the acoustic and inertial factors alone and the
keyframe is flagged as a fallback. The oldest keyframe leaves the window by
dropping its factors and anchoring the next one with a Gaussian prior from
the current marginal covariance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from .calibration import gravity_alignment, stereo_triangulate
from .dvl import TransducerGeometry, body_velocity_covariance, projection_vectors, solve_body_velocities
from .errors import ConfigError, DataError
from .factors import (
    EXTRINSIC_KEYS,
    BiasRandomWalkFactor,
    BodyVelocity,
    CameraModel,
    DvlTranslationFactor,
    DvlVelocityFactor,
    ExtrinsicSet,
    GravityModel,
    ImuFactor,
    KeyframeState,
    ProjectionFactors,
    _imu_common,
)
from .geometry import RigidTransform, cross3
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
    SolverSettings,
    marginalize_or_drop,
    solve,
)
from .preintegration import (
    ImuBias,
    ImuNoise,
    ImuStream,
    build_steps,
    dvl_step_weights,
    integrate_dvl,
    interpolation_weights,
    preintegrate_imu,
)
from .simulator import CameraFrame, SyntheticDataset

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    VISUAL = "visual-inertial-acoustic"
    FALLBACK = "acoustic-inertial-fallback"


@dataclass
class EstimatorConfig:
    window: int = 10
    keyframe_stride: int = 1  # every Nth camera frame becomes a keyframe
    extrinsics: ExtrinsicSet = field(default_factory=ExtrinsicSet)
    geometry: TransducerGeometry = field(default_factory=TransducerGeometry.nominal)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    sigma_d: float = 0.01
    pixel_sigma: float = 1.0
    huber: Optional[float] = None
    use_dvl: bool = True
    use_camera: bool = True
    fallback: bool = True  # solve keyframes without camera data from DVL + IMU; otherwise only predict
    gravity_init: str = "extrinsics"  # or "accelerometer"
    estimate_gravity: bool = True
    bias_prior_sigma: tuple = (1e-2, 1e-1)  # gyro rad/s, accel m/s^2
    dvl_hold: str = "cubic"
    gravity: float = 9.81
    solver: SolverSettings = field(
        default_factory=lambda: SolverSettings(max_iterations=10, cost_tolerance=1e-4, check_gauge=False))

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError("window must hold at least 2 keyframes")
        if self.keyframe_stride < 1:
            raise ConfigError("keyframe_stride must be >= 1")
        if self.gravity_init not in ("extrinsics", "accelerometer"):
            raise ConfigError(f"unknown gravity_init {self.gravity_init!r}")
        if self.dvl_hold not in ("zoh", "linear", "cubic"):
            raise ConfigError(f"unknown dvl_hold {self.dvl_hold!r}")
        if self.sigma_d <= 0 or self.pixel_sigma <= 0 or min(self.bias_prior_sigma) <= 0:
            raise ConfigError("noise standard deviations must be positive")
        if not (self.use_dvl or self.use_camera):
            raise ConfigError("at least one of the DVL and the camera must be enabled")


@dataclass
class TrajectoryEstimate:
    t: np.ndarray
    R: np.ndarray  # (N, 3, 3) camera orientation in C0
    p: np.ndarray  # (N, 3) camera position in C0
    v: np.ndarray  # (N, 3) DVL-frame velocity
    bias: np.ndarray  # (N, 6) gyro then accel
    modes: List[Mode]
    R_WI0: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __len__(self) -> int:
        return len(self.t)

    @property
    def fallback_mask(self) -> np.ndarray:
        return np.array([m == Mode.FALLBACK for m in self.modes], bool)


@dataclass
class _Keyframe:
    index: int  # camera frame index
    t: float
    frame: CameraFrame
    mode: Mode
    T: RigidTransform
    v: np.ndarray
    b: np.ndarray
    link: Optional[tuple] = None  # (PreintegratedImu, PreintegratedDvl) from the previous keyframe


class SlidingWindowEstimator:
    """Keyframe-by-keyframe fixed-lag smoother over a bounded window."""

    def __init__(self, config: EstimatorConfig, camera: CameraModel, imu: ImuStream,
                 dvl_t: np.ndarray, dvl_beams: np.ndarray):
        self.config = config
        self.camera = camera
        self.imu = imu
        self.dvl_t = np.asarray(dvl_t, float)
        E = projection_vectors(config.geometry)
        self.v_dvl = solve_body_velocities(np.asarray(dvl_beams, float), E)
        self.velocity_cov = body_velocity_covariance(E, config.sigma_d)
        self.gravity = GravityModel(config.gravity)
        self.extrinsics = config.extrinsics
        self.R_WI0 = np.array(config.extrinsics.R_WI0, float)
        self.window: List[_Keyframe] = []
        self.landmarks: Dict[int, np.ndarray] = {}
        self.prior: Optional[PriorFactor] = None
        self.done: List[_Keyframe] = []
        self.reports = []

    # prediction -----------------------------------------------------------
    def _dvl_velocity(self, t: float) -> np.ndarray:
        return (interpolation_weights(np.array([t]), self.dvl_t, cubic=True) @ self.v_dvl)[0]

    def _preintegrate(self, t0: float, t1: float, bias: np.ndarray):
        steps = build_steps(self.imu, t0, t1, hold="linear", extra_cuts=self.dvl_t)
        pre = preintegrate_imu(steps, ImuBias.from_vector(bias), self.config.imu_noise)
        pd = None
        if self.config.use_dvl:
            idx, W = dvl_step_weights(steps.t, self.dvl_t, self.config.dvl_hold)
            pd = integrate_dvl(pre.gyro, self.v_dvl[idx], self.extrinsics.T_ID.rotation, W,
                               velocity_cov=self.velocity_cov, gyro_density=self.config.imu_noise.gyro_density)
        return pre, pd

    def _predict(self, prev: _Keyframe, pre, pd, t: float):
        E = ExtrinsicSet(self.extrinsics.T_ID, self.extrinsics.T_DC, self.R_WI0)
        si = KeyframeState(prev.T.rotation, prev.T.translation, prev.v, ImuBias.from_vector(prev.b))
        A, a, C, _, _, wi, wj, ui, _ = _imu_common(si, si, E, pre)
        dR, dv, dp = pre.corrected(si.bias)
        Q = C.T @ dR @ C
        R_j = prev.T.rotation @ Q
        P = dR
        Ri = prev.T.rotation
        T = pre.dt_total
        if self.config.use_dvl:
            B, b = self.extrinsics.T_DC.rotation, self.extrinsics.T_DC.translation
            h = pd.corrected(si.bias.gyro)
            d = Ri @ B.T @ (A.T @ h - b + B @ Q @ B.T @ b)
            v_j = self._dvl_velocity(t)
        else:
            g = self.gravity.g_w
            z = self.R_WI0.T @ g * T
            z2 = self.R_WI0.T @ g * T * T
            p_IC = E.p_IC
            d = Ri @ C.T @ (dp - p_IC + P @ p_IC + ui * T + 0.5 * C @ Ri.T @ C.T @ z2)
            w = Ri.T @ C.T @ z
            uj = P.T @ (dv + ui + C @ w)
            v_j = A.T @ (uj + cross3(wj, a))
        return RigidTransform(R_j, prev.T.translation + d), v_j

    def _initial_gravity(self, t0: float) -> np.ndarray:
        """Level attitude from the mean specific force over the first 0.5 s."""
        m = (self.imu.t >= t0) & (self.imu.t <= t0 + 0.5)
        f = self.imu.accel[m].mean(axis=0) if m.any() else self.imu.accel[0]
        return gravity_alignment(-f)

    # window problem -------------------------------------------------------
    def _landmarks_from(self, kf: _Keyframe) -> None:
        if not self.config.use_camera or len(kf.frame.ids) == 0:
            return
        new = [m for m, i in enumerate(kf.frame.ids) if int(i) not in self.landmarks]
        if not new:
            return
        meas = kf.frame.meas[new]
        ok = meas[:, 0] - meas[:, 2] > 0
        if not ok.any():
            return
        X = stereo_triangulate(meas[ok], self.camera)
        for m, x in zip(np.asarray(new)[ok], X):
            self.landmarks[int(kf.frame.ids[m])] = kf.T.apply(x)

    def _build(self) -> FactorGraphProblem:
        c = self.config
        pb = FactorGraphProblem(c.solver)
        E = self.extrinsics
        pb.add_variable("R_ID", EXTRINSIC_ROTATION, E.T_ID.rotation.copy(), fixed=True)
        pb.add_variable("p_ID", EXTRINSIC_TRANSLATION, E.T_ID.translation.copy(), fixed=True)
        pb.add_variable("R_DC", EXTRINSIC_ROTATION, E.T_DC.rotation.copy(), fixed=True)
        pb.add_variable("p_DC", EXTRINSIC_TRANSLATION, E.T_DC.translation.copy(), fixed=True)
        pb.add_variable("R_WI0", GRAVITY_ROTATION, self.R_WI0.copy(), fixed=not c.estimate_gravity)
        first = self.window[0]
        anchored = self.prior is None
        for kf in self.window:
            k = kf.index
            pb.add_variable(("T", k), POSE, kf.T, fixed=anchored and kf is first)
            pb.add_variable(("v", k), VELOCITY, kf.v.copy())
            pb.add_variable(("b", k), BIAS, kf.b.copy())
            if c.use_dvl:
                pb.add_factor(DvlVelocityFactor(("v", k), BodyVelocity(self._dvl_velocity(kf.t), self.velocity_cov)))
        if anchored:
            sig = np.concatenate([np.full(3, c.bias_prior_sigma[0]), np.full(3, c.bias_prior_sigma[1])])
            pb.add_factor(PriorFactor([("b", first.index)], [BIAS], [np.zeros(6)], np.diag(1.0 / sig)))
        else:
            pb.add_factor(self.prior)
        for prev, kf in zip(self.window[:-1], self.window[1:]):
            i, j = prev.index, kf.index
            pre, pd = kf.link
            pb.add_factor(ImuFactor(("T", i), ("T", j), ("v", i), ("v", j), ("b", i), pre, gravity=self.gravity))
            pb.add_factor(BiasRandomWalkFactor(("b", i), ("b", j), kf.t - prev.t,
                                               c.imu_noise.gyro_walk, c.imu_noise.accel_walk))
            if c.use_dvl:
                pb.add_factor(DvlTranslationFactor(("T", i), ("T", j), ("b", i), pd))
        if c.use_camera:
            pk, lk, meas = [], [], []
            for kf in self.window:
                for m, lid in enumerate(kf.frame.ids):
                    lid = int(lid)
                    if lid in self.landmarks:
                        pk.append(("T", kf.index))
                        lk.append(("l", lid))
                        meas.append(kf.frame.meas[m])
            for lid in dict.fromkeys(lk):
                pb.add_variable(lid, LANDMARK, self.landmarks[lid[1]].copy())
            if meas:
                pb.add_factor(ProjectionFactors(pk, lk, np.array(meas), self.camera, c.pixel_sigma, c.huber))
        return pb

    def _store(self, values: dict) -> None:
        for kf in self.window:
            kf.T = values[("T", kf.index)]
            kf.v = np.asarray(values[("v", kf.index)], float)
            kf.b = np.asarray(values[("b", kf.index)], float)
        self.R_WI0 = np.asarray(values["R_WI0"], float)
        for key, val in values.items():
            if isinstance(key, tuple) and key[0] == "l":
                self.landmarks[key[1]] = np.asarray(val, float)

    def _slide(self, pb: FactorGraphProblem) -> None:
        old = self.window.pop(0)
        nxt = self.window[0].index
        keep = [("T", nxt), ("v", nxt), ("b", nxt)]
        if self.config.estimate_gravity:
            keep.append("R_WI0")
        # The boundary prior is taken from the full-window marginal before the drop.
        marginalize_or_drop(pb, [("T", old.index), ("v", old.index), ("b", old.index)], keep)
        self.prior = pb.factors[-1]
        self.done.append(old)
        seen = {int(i) for kf in self.window for i in kf.frame.ids}
        self.landmarks = {i: x for i, x in self.landmarks.items() if i in seen}

    # main loop ------------------------------------------------------------
    def add_keyframe(self, index: int, frame: CameraFrame) -> _Keyframe:
        c = self.config
        has_camera = c.use_camera and len(frame.ids) > 0
        mode = Mode.VISUAL if has_camera else Mode.FALLBACK
        if not c.use_camera:
            frame = CameraFrame(frame.t, frame.ids[:0], frame.meas[:0])
        if not self.window and not self.done:
            if c.gravity_init == "accelerometer":
                self.R_WI0 = self._initial_gravity(frame.t)
            v0 = self._dvl_velocity(frame.t) if c.use_dvl else np.zeros(3)
            kf = _Keyframe(index, frame.t, frame, mode, RigidTransform.identity(), v0, np.zeros(6))
        else:
            prev = self.window[-1]
            if frame.t <= prev.t:
                raise DataError(f"keyframe time {frame.t} not after {prev.t}")
            pre, pd = self._preintegrate(prev.t, frame.t, prev.b)
            T, v = self._predict(prev, pre, pd, frame.t)
            kf = _Keyframe(index, frame.t, frame, mode, T, v, prev.b.copy(), (pre, pd))
        self.window.append(kf)
        self._landmarks_from(kf)
        if len(self.window) == 1:
            return kf
        if has_camera or c.fallback:
            pb = self._build()
            values, report = solve(pb)
            self.reports.append(report)
            self._store(values)
        else:
            pb = None
        if len(self.window) > c.window:
            if pb is None:
                pb = self._build()
            self._slide(pb)
        assert len(self.window) <= c.window
        return kf

    def result(self) -> TrajectoryEstimate:
        kfs = self.done + self.window
        return TrajectoryEstimate(
            t=np.array([k.t for k in kfs]),
            R=np.array([k.T.rotation for k in kfs]),
            p=np.array([k.T.translation for k in kfs]),
            v=np.array([k.v for k in kfs]),
            bias=np.array([k.b for k in kfs]),
            modes=[k.mode for k in kfs],
            R_WI0=self.R_WI0.copy(),
        )


def run_estimator(dataset: SyntheticDataset, config: Optional[EstimatorConfig] = None,
                  camera: Optional[CameraModel] = None) -> TrajectoryEstimate:
    """Process every ``keyframe_stride``-th camera frame of ``dataset``."""
    config = config or EstimatorConfig()
    est = SlidingWindowEstimator(config, camera or dataset.rig.camera, dataset.imu, dataset.dvl_t,
                                 dataset.dvl_beams)
    idx = range(0, len(dataset.frames), config.keyframe_stride)
    for n, k in enumerate(idx):
        est.add_keyframe(k, dataset.frames[k])
        if n % 50 == 0:
            logger.debug("keyframe %d/%d", n, len(idx))
    return est.result()
