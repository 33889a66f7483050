"""Residuals and analytic Jacobians for every factor type.

Conventions
-----------
* Keyframe pose ``(R_i, p_i)`` is the camera pose in the first camera frame
  C0; ``v_i`` is the DVL-frame velocity of the DVL origin.
* Pose rotations use the right increment ``R <- R Exp(d)``; extrinsic and
  gravity rotations use the left increment ``R <- Exp(d) R``. Everything
  else is Euclidean.
* Jacobian dictionaries are keyed by parameter name (``R_i``, ``p_i``,
  ``R_j``, ``p_j``, ``v_i``, ``v_j``, ``b_g``, ``b_a``, ``R_ID``, ``p_ID``,
  ``R_DC``, ``p_DC``, ``R_WI0``); missing keys mean a zero block.

The IMU velocity seen by the accelerometer differs from the DVL origin
velocity by the lever arm ``omega x p_ID``. The IMU factors include this
term using the gyro reading at each keyframe; with ``p_ID = 0`` it vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .dvl import BodyVelocity
from .errors import BehindCamera
from .geometry import (
    RigidTransform,
    cross3,
    exp_so3,
    hat,
    hat_batch,
    log_so3,
    right_jacobian,
    right_jacobian_inv,
)
from .preintegration import (
    SIGMA_PHI,
    SIGMA_V,
    ImuBias,
    PreintegratedDvl,
    PreintegratedImu,
    approx_update_dvl,
    bias_correction_jacobian_phi,
    reintegrate_dvl_bias,
    reintegrate_dvl_full,
    reintegrate_dvl_velocities,
    relative_rotation_increment,
)

GRAVITY = 9.81
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class GravityModel:
    g: float = GRAVITY

    @property
    def g_w(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.g])


@dataclass
class KeyframeState:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: ImuBias = field(default_factory=ImuBias)


@dataclass(frozen=True)
class ExtrinsicSet:
    """IMU<-DVL and DVL<-camera transforms plus the initial IMU attitude."""

    T_ID: RigidTransform = field(default_factory=RigidTransform)
    T_DC: RigidTransform = field(default_factory=RigidTransform)
    R_WI0: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def T_IC(self) -> RigidTransform:
        return self.T_ID.compose(self.T_DC)

    @property
    def R_IC(self) -> np.ndarray:
        return self.T_ID.rotation @ self.T_DC.rotation

    @property
    def p_IC(self) -> np.ndarray:
        return self.T_ID.rotation @ self.T_DC.translation + self.T_ID.translation

    @property
    def p_CI(self) -> np.ndarray:
        return -self.R_IC.T @ self.p_IC

    def to_dict(self) -> dict:
        return {
            "R_ID": self.T_ID.rotation.tolist(),
            "p_ID": self.T_ID.translation.tolist(),
            "R_DC": self.T_DC.rotation.tolist(),
            "p_DC": self.T_DC.translation.tolist(),
            "R_WI0": np.asarray(self.R_WI0).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtrinsicSet":
        return cls(
            RigidTransform(np.array(d["R_ID"]), np.array(d["p_ID"])),
            RigidTransform(np.array(d["R_DC"]), np.array(d["p_DC"])),
            np.array(d.get("R_WI0", np.eye(3))),
        )


@dataclass(frozen=True)
class CameraModel:
    """Rectified stereo pinhole camera."""

    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    baseline: float = 0.2
    width: int = 640
    height: int = 480

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, baseline=self.baseline,
                    width=self.width, height=self.height)


@dataclass(frozen=True)
class CameraObservation:
    keyframe: int
    landmark: int
    pixel: np.ndarray
    u_right: Optional[float] = None
    sigma: float = 1.0

    def measurement(self) -> np.ndarray:
        px = np.asarray(self.pixel, float).reshape(2)
        if self.u_right is None:
            return px
        return np.array([px[0], px[1], self.u_right])


# ---------------------------------------------------------------------------
# Residual functions


def dvl_velocity_residual(state: KeyframeState, measured: BodyVelocity):
    r = np.asarray(measured.v, float) - state.v
    return r, {"v_i": -np.eye(3)}


def dvl_translation_model(si: KeyframeState, sj: KeyframeState, E: ExtrinsicSet):
    """Predicted DVL translation h and its Jacobians (w.r.t. h)."""
    A, B, b = E.T_ID.rotation, E.T_DC.rotation, E.T_DC.translation
    Ri_t = si.R.T
    Q = Ri_t @ sj.R
    d = sj.p - si.p
    y = B @ Q @ B.T @ b
    Rid = Ri_t @ d
    X = b - y + B @ Rid
    h = A @ X
    AB = A @ B
    J = {
        "p_j": AB @ Ri_t,
        "p_i": -AB @ Ri_t,
        "R_i": AB @ (hat(Rid) - hat(Q @ B.T @ b)),
        "R_j": AB @ Q @ hat(B.T @ b),
        "R_ID": -hat(h),
        "R_DC": A @ (hat(y) - B @ Q @ B.T @ hat(b) - hat(B @ Rid)),
        "p_DC": A @ (np.eye(3) - B @ Q @ B.T),
    }
    return h, J


def dvl_translation_residual(
    si: KeyframeState,
    sj: KeyframeState,
    E: ExtrinsicSet,
    p: PreintegratedDvl,
    approximate: bool = False,
):
    """r = dp_bar - h with Jacobians.

    With ``approximate`` the R_ID dependence of dp_bar uses the stored
    linear model around ``p.extrinsic_lin``; otherwise the sum is
    re-evaluated at ``E``'s R_ID whenever it differs.
    """
    R_ID = E.T_ID.rotation
    phi = relative_rotation_increment(R_ID, p.extrinsic_lin)
    if approximate:
        dp_bar = p.corrected(si.bias.gyro) + p.J_phi @ phi
        # phi = Log(R_ID R_lin^T) moves by Jl^-1(phi) = Jr^-1(-phi) under a left increment.
        J_phi, J_bg = p.J_phi @ right_jacobian_inv(-phi), p.J_bg
    else:
        q = reintegrate_dvl_full(p, R_ID) if np.any(phi) else p
        dbg = si.bias.gyro - q.bias_gyro_lin
        dp_bar = q.corrected(si.bias.gyro)
        J_phi = q.J_phi + bias_correction_jacobian_phi(q, dbg)
        J_bg = q.J_bg
    h, Jh = dvl_translation_model(si, sj, E)
    J = {k: -v for k, v in Jh.items()}
    J["R_ID"] = J_phi - Jh["R_ID"]
    J["b_g"] = J_bg
    return dp_bar - h, J


def _imu_common(si, sj, E, pre):
    A, a = E.T_ID.rotation, E.T_ID.translation
    C = E.R_IC
    Q = si.R.T @ sj.R
    P = C @ Q @ C.T
    bg = si.bias.gyro
    wi = pre.steps.omega_start - bg
    wj = pre.steps.omega_end - bg
    ui = A @ si.v - cross3(wi, a)
    uj = A @ sj.v - cross3(wj, a)
    return A, a, C, Q, P, wi, wj, ui, uj


def imu_rotation_residual(si: KeyframeState, sj: KeyframeState, E: ExtrinsicSet, pre: PreintegratedImu):
    A = E.T_ID.rotation
    C = E.R_IC
    dbg = si.bias.gyro - pre.bias_lin.gyro
    corr = pre.dR_dbg @ dbg
    dR = pre.delta_R @ exp_so3(corr)
    M = C @ si.R.T @ sj.R @ C.T @ dR.T
    r = log_so3(M)
    Jinv = right_jacobian_inv(r)
    JC = Jinv @ (M.T - dR)
    J = {
        "R_j": Jinv @ dR @ C,
        "R_i": -Jinv @ M.T @ C,
        "R_ID": JC,
        "R_DC": JC @ A,
        "b_g": -Jinv @ dR @ right_jacobian(corr) @ pre.dR_dbg,
    }
    return r, J


def imu_velocity_residual(
    si: KeyframeState,
    sj: KeyframeState,
    E: ExtrinsicSet,
    pre: PreintegratedImu,
    gravity: GravityModel = GravityModel(),
):
    A, a, C, Q, P, wi, wj, ui, uj = _imu_common(si, sj, E, pre)
    G = E.R_WI0
    T = pre.dt_total
    g_dt = gravity.g_w * T
    z = G.T @ g_dt
    CRt = C @ si.R.T
    w = si.R.T @ C.T @ z
    h = P @ uj - ui - C @ w
    _, dv, _ = pre.corrected(si.bias)
    a_hat = hat(a)
    dh_dC = -hat(P @ uj) + P @ hat(uj) + hat(CRt @ C.T @ z) - CRt @ C.T @ hat(z)
    Jh = {
        "R_j": -C @ Q @ hat(C.T @ uj),
        "R_i": C @ hat(Q @ C.T @ uj) - C @ hat(w),
        "v_j": P @ A,
        "v_i": -A,
        "b_g": -P @ a_hat + a_hat,
        "p_ID": -P @ hat(wj) + hat(wi),
        "R_ID": dh_dC - P @ hat(A @ sj.v) + hat(A @ si.v),
        "R_DC": dh_dC @ A,
        "R_WI0": -CRt @ C.T @ G.T @ hat(g_dt),
    }
    J = {k: -v for k, v in Jh.items()}
    J["b_g"] = pre.dv_dbg - Jh["b_g"]
    J["b_a"] = pre.dv_dba.copy()
    return dv - h, J


def imu_translation_residual(
    si: KeyframeState,
    sj: KeyframeState,
    E: ExtrinsicSet,
    pre: PreintegratedImu,
    gravity: GravityModel = GravityModel(),
):
    A, a, C, Q, P, wi, wj, ui, uj = _imu_common(si, sj, E, pre)
    b = E.T_DC.translation
    G = E.R_WI0
    T = pre.dt_total
    g_dt2 = gravity.g_w * T * T
    z2 = G.T @ g_dt2
    p_IC = A @ b + a
    d = sj.p - si.p
    CRt = C @ si.R.T
    Rid = si.R.T @ d
    I3 = np.eye(3)
    h = p_IC - P @ p_IC + CRt @ d - ui * T - 0.5 * CRt @ C.T @ z2
    _, _, dp = pre.corrected(si.bias)
    dh_dC = (
        hat(P @ p_IC) - P @ hat(p_IC) - hat(CRt @ d)
        + 0.5 * hat(CRt @ C.T @ z2) - 0.5 * CRt @ C.T @ hat(z2)
    )
    Jh = {
        "p_j": CRt,
        "p_i": -CRt,
        "R_j": C @ Q @ hat(C.T @ p_IC),
        "R_i": -C @ hat(Q @ C.T @ p_IC) + C @ hat(Rid) - 0.5 * C @ hat(si.R.T @ C.T @ z2),
        "v_i": -A * T,
        "b_g": hat(a) * T,
        "p_ID": I3 - P + hat(wi) * T,
        "p_DC": (I3 - P) @ A,
        "R_ID": dh_dC - (I3 - P) @ hat(A @ b) + hat(A @ si.v) * T,
        "R_DC": dh_dC @ A,
        "R_WI0": -0.5 * CRt @ C.T @ G.T @ hat(g_dt2),
    }
    J = {k: -v for k, v in Jh.items()}
    J["b_g"] = pre.dp_dbg - Jh["b_g"]
    J["b_a"] = pre.dp_dba.copy()
    return dp - h, J


def project_batch(R: np.ndarray, p: np.ndarray, l: np.ndarray, cam: CameraModel, stereo: bool = True):
    """Project landmarks into cameras.

    ``R`` (M, 3, 3), ``p`` (M, 3) camera poses and ``l`` (M, 3) landmarks.
    Returns predictions (M, 2|3), depths (M,), d pred / d [theta, p] (M, k, 6)
    and d pred / d l (M, k, 3).
    """
    Rt = np.swapaxes(R, -1, -2)
    x = np.einsum("mij,mj->mi", Rt, l - p)
    z = x[:, 2]
    zs = np.where(np.abs(z) > MIN_DEPTH, z, MIN_DEPTH)
    inv_z = 1.0 / zs
    u = cam.fx * x[:, 0] * inv_z + cam.cx
    v = cam.fy * x[:, 1] * inv_z + cam.cy
    M = len(x)
    k = 3 if stereo else 2
    D = np.zeros((M, k, 3))
    D[:, 0, 0] = cam.fx * inv_z
    D[:, 0, 2] = -cam.fx * x[:, 0] * inv_z**2
    D[:, 1, 1] = cam.fy * inv_z
    D[:, 1, 2] = -cam.fy * x[:, 1] * inv_z**2
    cols = [u, v]
    if stereo:
        ur = cam.fx * (x[:, 0] - cam.baseline) * inv_z + cam.cx
        D[:, 2, 0] = cam.fx * inv_z
        D[:, 2, 2] = -cam.fx * (x[:, 0] - cam.baseline) * inv_z**2
        cols.append(ur)
    pred = np.column_stack(cols)
    J_pose = np.concatenate([D @ hat_batch(x), -D @ Rt], axis=2)
    J_l = D @ Rt
    return pred, z, J_pose, J_l


def reprojection_residual(
    state: KeyframeState, landmark: np.ndarray, obs: CameraObservation, cam: CameraModel
):
    meas = obs.measurement()
    stereo = meas.size == 3
    pred, z, J_pose, J_l = project_batch(
        state.R[None], state.p[None], np.asarray(landmark, float)[None], cam, stereo
    )
    if z[0] < MIN_DEPTH:
        raise BehindCamera(f"landmark {obs.landmark} behind camera of keyframe {obs.keyframe}")
    return pred[0] - meas, {"R_i": J_pose[0, :, :3], "p_i": J_pose[0, :, 3:], "l": J_l[0]}


def prior_residual(values: Sequence, means: Sequence, kinds: Sequence[str], covariance: np.ndarray):
    """Whitened stacked manifold difference for a set of states.

    ``kinds`` entries: ``"pose"`` (R, p) with right increments,
    ``"rotation"`` (left increment), ``"vector"``.
    """
    r = np.concatenate([local_difference(k, x, m) for k, x, m in zip(kinds, values, means)])
    L = sqrt_information(covariance)
    return L @ r, r


def local_difference(kind: str, x, mean) -> np.ndarray:
    if kind == "pose":
        return np.concatenate([log_so3(mean[0].T @ x[0]), np.asarray(x[1]) - mean[1]])
    if kind in ("rotation", "gravity"):
        return log_so3(np.asarray(x) @ np.asarray(mean).T)
    return np.asarray(x, float).reshape(-1) - np.asarray(mean, float).reshape(-1)


def sqrt_information(cov: np.ndarray) -> np.ndarray:
    """Whitening matrix L with L^T L = cov^-1."""
    cov = np.atleast_2d(np.asarray(cov, float))
    C = np.linalg.cholesky(0.5 * (cov + cov.T))
    return np.linalg.inv(C)


# ---------------------------------------------------------------------------
# Factor-graph wrappers

from .optimizer import Factor  # noqa: E402

EXTRINSIC_KEYS = {"R_ID": "R_ID", "p_ID": "p_ID", "R_DC": "R_DC", "p_DC": "p_DC", "R_WI0": "R_WI0"}


def _extrinsics(values: dict, ek: dict) -> ExtrinsicSet:
    return ExtrinsicSet(
        RigidTransform(values[ek["R_ID"]], values[ek["p_ID"]]),
        RigidTransform(values[ek["R_DC"]], values[ek["p_DC"]]),
        values[ek["R_WI0"]],
    )


def _state(values: dict, pose_key, vel_key=None, bias_key=None) -> KeyframeState:
    T = values[pose_key]
    v = values[vel_key] if vel_key is not None else np.zeros(3)
    b = ImuBias.from_vector(values[bias_key]) if bias_key is not None else ImuBias()
    return KeyframeState(T.rotation, T.translation, np.asarray(v, float), b)


def _stack(Js: list, names: Sequence[str], rows: Sequence[int]) -> np.ndarray:
    """Stack per-component Jacobian dicts into one block for ``names``."""
    out = []
    for J, m in zip(Js, rows):
        out.append(np.hstack([J.get(n, np.zeros((m, 3))) for n in names]))
    return np.vstack(out)


def _floored_sqrt_info(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = np.asarray(cov, float) + floor**2 * np.eye(len(cov))
    return sqrt_information(cov)


class ImuFactor(Factor):
    """Stacked IMU rotation / velocity / translation residuals."""

    _COMPONENT_SLICES = {"rot": slice(0, 3), "vel": slice(3, 6), "pos": slice(6, 9)}

    def __init__(self, pose_i, pose_j, vel_i, vel_j, bias, pre: PreintegratedImu,
                 components: Sequence[str] = ("rot", "vel", "pos"), extrinsic_keys: Optional[dict] = None,
                 gravity: GravityModel = GravityModel(), floor: float = 1e-6, reintegrate: bool = True):
        self.components = tuple(components)
        self.ek = dict(EXTRINSIC_KEYS if extrinsic_keys is None else extrinsic_keys)
        self.pose_i, self.pose_j, self.vel_i, self.vel_j, self.bias = pose_i, pose_j, vel_i, vel_j, bias
        self.keys = (pose_i, pose_j, vel_i, vel_j, bias, self.ek["R_ID"], self.ek["p_ID"],
                     self.ek["R_DC"], self.ek["p_DC"], self.ek["R_WI0"])
        self.label = "imu_" + "_".join(self.components)
        self.pre = pre
        self.gravity = gravity
        self.floor = floor
        self.reintegrate = reintegrate
        self.reintegrations = 0
        self.extra_cov = None
        self._update_weights()

    def set_extra_covariance(self, cov: Optional[np.ndarray]) -> None:
        """Covariance added to the pre-integration covariance, e.g. from uncertain fixed poses."""
        self.extra_cov = None if cov is None else np.asarray(cov, float)
        self._update_weights()

    def _update_weights(self):
        idx = np.concatenate([np.arange(9)[self._COMPONENT_SLICES[c]] for c in self.components])
        cov = self.pre.covariance[np.ix_(idx, idx)]
        if self.extra_cov is not None:
            cov = cov + self.extra_cov
        self.sqrt_info = _floored_sqrt_info(cov, self.floor)

    def raw(self, values: dict):
        si = _state(values, self.pose_i, self.vel_i, self.bias)
        sj = _state(values, self.pose_j, self.vel_j, None)
        E = _extrinsics(values, self.ek)
        rs, Js = [], []
        for c in self.components:
            if c == "rot":
                r, J = imu_rotation_residual(si, sj, E, self.pre)
            elif c == "vel":
                r, J = imu_velocity_residual(si, sj, E, self.pre, self.gravity)
            else:
                r, J = imu_translation_residual(si, sj, E, self.pre, self.gravity)
            rs.append(r)
            Js.append(J)
        return np.concatenate(rs), Js

    def linearize(self, values, jacobians=True):
        r, Js = self.raw(values)
        r = self.sqrt_info @ r
        if not jacobians:
            return r, None
        rows = [3] * len(Js)
        L = self.sqrt_info
        blocks = [
            L @ _stack(Js, ["R_i", "p_i"], rows),
            L @ _stack(Js, ["R_j", "p_j"], rows),
            L @ _stack(Js, ["v_i"], rows) if self.vel_i is not None else None,
            L @ _stack(Js, ["v_j"], rows) if self.vel_j is not None else None,
            L @ _stack(Js, ["b_g", "b_a"], rows) if self.bias is not None else None,
            L @ _stack(Js, ["R_ID"], rows),
            L @ _stack(Js, ["p_ID"], rows),
            L @ _stack(Js, ["R_DC"], rows),
            L @ _stack(Js, ["p_DC"], rows),
            (L @ _stack(Js, ["R_WI0"], rows))[:, :2],
        ]
        return r, blocks

    def relinearize(self, values):
        if not self.reintegrate or self.bias is None:
            return False
        b = ImuBias.from_vector(values[self.bias])
        if self.pre.needs_reintegration(b):
            self.pre = self.pre.reintegrated(b)
            self.reintegrations += 1
            self._update_weights()
            return True
        return False


class DvlTranslationFactor(Factor):
    """DVL translation residual with optional linearized R_ID updates."""

    label = "dvl_translation"

    def __init__(self, pose_i, pose_j, bias, pre: PreintegratedDvl, extrinsic_keys: Optional[dict] = None,
                 approximate: bool = False, sigma_phi: float = SIGMA_PHI, floor: float = 1e-6):
        self.ek = dict(EXTRINSIC_KEYS if extrinsic_keys is None else extrinsic_keys)
        self.pose_i, self.pose_j, self.bias = pose_i, pose_j, bias
        self.keys = (pose_i, pose_j, bias, self.ek["R_ID"], self.ek["R_DC"], self.ek["p_DC"])
        self.pre = pre
        self.approximate = approximate
        self.sigma_phi = sigma_phi
        self.floor = floor
        self.reintegrations = 0
        self._hits = 0
        self.extra_cov = None
        self.sqrt_info = self._weights()

    def _weights(self) -> np.ndarray:
        cov = self.pre.covariance if self.extra_cov is None else self.pre.covariance + self.extra_cov
        return _floored_sqrt_info(cov, self.floor)

    def set_extra_covariance(self, cov: Optional[np.ndarray]) -> None:
        """Covariance added to the pre-integration covariance, e.g. from uncertain fixed poses."""
        self.extra_cov = None if cov is None else np.asarray(cov, float)
        self.sqrt_info = self._weights()

    @property
    def approx_hits(self) -> int:
        return self._hits

    def _sync(self, R_ID: np.ndarray) -> bool:
        """Make the cached sum usable at R_ID; returns True if linearized."""
        phi = relative_rotation_increment(R_ID, self.pre.extrinsic_lin)
        n = float(np.linalg.norm(phi))
        if n == 0.0:
            return False
        if self.approximate and n < self.sigma_phi:
            self._hits += 1
            return True
        self.pre = reintegrate_dvl_full(self.pre, R_ID)
        self.reintegrations += 1
        return False

    def raw(self, values):
        si = _state(values, self.pose_i, None, self.bias)
        sj = _state(values, self.pose_j)
        E = _extrinsics(values, self.ek)
        self._sync(E.T_ID.rotation)
        return dvl_translation_residual(si, sj, E, self.pre, approximate=self.approximate)

    def linearize(self, values, jacobians=True):
        r, J = self.raw(values)
        L = self.sqrt_info
        r = L @ r
        if not jacobians:
            return r, None
        z = np.zeros((3, 3))
        return r, [
            L @ np.hstack([J["R_i"], J["p_i"]]),
            L @ np.hstack([J["R_j"], J["p_j"]]),
            L @ np.hstack([J["b_g"], z]) if self.bias is not None else None,
            L @ J["R_ID"],
            L @ J["R_DC"],
            L @ J["p_DC"],
        ]

    def relinearize(self, values):
        changed = False
        if self.bias is not None:
            bg = np.asarray(values[self.bias])[:3]
            if np.abs(bg - self.pre.bias_gyro_lin).max() > 1e-3:
                self.pre = reintegrate_dvl_bias(self.pre, bg)
                changed = True
        new_L = self._weights()
        if changed or not np.array_equal(new_L, self.sqrt_info):
            self.sqrt_info = new_L
            changed = True
        return changed

    def refresh(self, values) -> None:
        """Re-integrate exactly at the current R_ID (drops the linear model)."""
        R_ID = values[self.ek["R_ID"]]
        if np.any(relative_rotation_increment(R_ID, self.pre.extrinsic_lin)):
            self.pre = reintegrate_dvl_full(self.pre, R_ID)
            self.reintegrations += 1
        self.sqrt_info = self._weights()


class DvlVelocityFactor(Factor):
    label = "dvl_velocity"

    def __init__(self, vel_key, measured: BodyVelocity, floor: float = 1e-6):
        self.keys = (vel_key,)
        self.measured = measured
        self.sqrt_info = _floored_sqrt_info(measured.covariance, floor)

    def linearize(self, values, jacobians=True):
        r = self.sqrt_info @ (np.asarray(self.measured.v) - values[self.keys[0]])
        return r, ([-self.sqrt_info] if jacobians else None)


class BiasRandomWalkFactor(Factor):
    label = "bias_walk"

    def __init__(self, bias_i, bias_j, dt: float, gyro_walk: float, accel_walk: float, floor: float = 1e-9):
        self.keys = (bias_i, bias_j)
        sig = np.concatenate([np.full(3, gyro_walk), np.full(3, accel_walk)]) * np.sqrt(max(dt, 0.0))
        self.sqrt_info = np.diag(1.0 / np.maximum(sig, floor))

    def linearize(self, values, jacobians=True):
        r = self.sqrt_info @ (values[self.keys[1]] - values[self.keys[0]])
        return r, ([-self.sqrt_info, self.sqrt_info] if jacobians else None)


class SegmentVelocityFactor(Factor):
    """DVL translation of one interval against unknown velocity knots.

    Used by the misalignment calibration: ``h`` is the translation implied
    by the fixed camera poses and extrinsics, and the interval increment is
    re-evaluated for the knot velocities held in ``vel_keys`` (one key per
    row of ``pre.velocities``).
    """

    label = "segment_velocity"

    def __init__(self, vel_keys: Sequence, pre: PreintegratedDvl, h: np.ndarray, sigma: float = 1e-3,
                 approximate: bool = True, sigma_v: float = SIGMA_V):
        self.keys = tuple(vel_keys)
        if len(self.keys) != len(pre.velocities):
            raise ValueError("one velocity key per knot is required")
        self.pre = pre
        self.h = np.asarray(h, float)
        self.sqrt_info = np.eye(3) / sigma
        self.approximate = approximate
        self.sigma_v = sigma_v
        self._hits = 0
        self.reintegrations = 0

    @property
    def approx_hits(self) -> int:
        return self._hits

    def predicted(self, values) -> np.ndarray:
        v = np.array([values[k] for k in self.keys], float).reshape(-1, 3)
        dv = v - self.pre.velocities
        if not np.any(dv):
            return self.pre.delta_p_bar
        if self.approximate:
            dp, used = approx_update_dvl(self.pre, delta_v=dv, sigma_v=self.sigma_v)
            if used:
                self._hits += 1
                return dp
        self.pre = reintegrate_dvl_velocities(self.pre, v)
        self.reintegrations += 1
        return self.pre.delta_p_bar

    def linearize(self, values, jacobians=True):
        r = self.sqrt_info @ (self.predicted(values) - self.h)
        if not jacobians:
            return r, None
        return r, [self.sqrt_info @ G for G in self.pre.G]


class ReprojectionFactor(Factor):
    label = "camera"

    def __init__(self, pose_key, landmark_key, measurement: np.ndarray, cam: CameraModel, sigma: float = 1.0):
        self.keys = (pose_key, landmark_key)
        self.meas = np.asarray(measurement, float)
        self.cam = cam
        self.sigma = sigma

    def linearize(self, values, jacobians=True):
        T = values[self.keys[0]]
        l = values[self.keys[1]]
        stereo = self.meas.size == 3
        pred, z, Jp, Jl = project_batch(T.rotation[None], T.translation[None], np.asarray(l)[None],
                                        self.cam, stereo)
        r = (pred[0] - self.meas) / self.sigma
        if not jacobians:
            return r, None
        return r, [Jp[0] / self.sigma, Jl[0] / self.sigma]


class ProjectionFactors(Factor):
    """Vectorized set of camera observations.

    Observations whose landmark falls behind the camera are skipped on each
    evaluation and counted in ``dropped``.
    """

    label = "camera"
    batched = True

    def __init__(self, pose_keys: Sequence, landmark_keys: Sequence, measurements: np.ndarray,
                 cam: CameraModel, sigma: float | np.ndarray = 1.0, huber: Optional[float] = None):
        self.pose_keys = list(pose_keys)
        self.landmark_keys = list(landmark_keys)
        self.meas = np.asarray(measurements, float)
        self.stereo = self.meas.shape[1] == 3
        self.cam = cam
        self.sigma = np.broadcast_to(np.asarray(sigma, float), (len(self.meas),)).copy()
        self.huber = huber
        self.keys = tuple(dict.fromkeys(self.pose_keys + self.landmark_keys))
        self.dropped = 0

    def __len__(self) -> int:
        return len(self.meas)

    def _gather(self, values):
        upk = list(dict.fromkeys(self.pose_keys))
        pidx = {k: i for i, k in enumerate(upk)}
        Rs = np.array([values[k].rotation for k in upk])
        ps = np.array([values[k].translation for k in upk])
        pi = np.array([pidx[k] for k in self.pose_keys], dtype=int)
        l = np.array([values[k] for k in self.landmark_keys], dtype=float).reshape(-1, 3)
        return Rs[pi], ps[pi], l

    def evaluate(self, values, jacobians=True):
        """Whitened, robustified residuals (M, k) plus Jacobians and validity mask."""
        R, p, l = self._gather(values)
        pred, z, Jp, Jl = project_batch(R, p, l, self.cam, self.stereo)
        valid = z > MIN_DEPTH
        self.dropped = int((~valid).sum())
        inv_s = 1.0 / self.sigma
        r = (pred - self.meas) * inv_s[:, None]
        r[~valid] = 0.0
        cost = np.einsum("mk,mk->m", r, r)
        if self.huber is not None:
            e = np.sqrt(cost)
            big = e > self.huber
            w = np.where(big, self.huber / np.maximum(e, 1e-300), 1.0)
            cost = np.where(big, 2.0 * self.huber * e - self.huber**2, cost)
            sw = np.sqrt(w)
        else:
            sw = np.ones(len(r))
        r = r * sw[:, None]
        if not jacobians:
            return r, None, None, valid, float(cost.sum())
        scale = (inv_s * sw * valid)[:, None, None]
        return r, Jp * scale, Jl * scale, valid, float(cost.sum())

    def cost(self, values):
        return self.evaluate(values, jacobians=False)[4]

    def linearize(self, values, jacobians=True):
        r, Jp, Jl, valid, _ = self.evaluate(values, jacobians)
        rf = r.reshape(-1)
        if not jacobians:
            return rf, None
        k = r.shape[1]
        M = len(r)
        blocks = []
        for key in self.keys:
            is_pose = key in self.pose_keys
            B = np.zeros((M * k, 6 if is_pose else 3))
            for m in range(M):
                if is_pose and self.pose_keys[m] == key:
                    B[m * k:(m + 1) * k] += Jp[m]
                if not is_pose and self.landmark_keys[m] == key:
                    B[m * k:(m + 1) * k] += Jl[m]
            blocks.append(B)
        return rf, blocks

    def accumulate(self, values, layout, Hcc, gc, Hcl, Hll, gl) -> float:
        r, Jp, Jl, valid, cost = self.evaluate(values)
        off = np.array([layout.offsets.get(k, -1) for k in self.pose_keys])
        li = np.array([layout.lm_index.get(k, -1) for k in self.landmark_keys])
        mp = off >= 0
        ml = li >= 0
        gp = np.einsum("mki,mk->mi", Jp, r)
        g_l = np.einsum("mki,mk->mi", Jl, r)
        if mp.any():
            Hpp = np.einsum("mki,mkj->mij", Jp[mp], Jp[mp])
            rows = off[mp][:, None] + np.arange(6)
            np.add.at(Hcc, (rows[:, :, None], rows[:, None, :]), Hpp)
            np.add.at(gc, rows, gp[mp])
        if ml.any():
            Hl = np.einsum("mki,mkj->mij", Jl[ml], Jl[ml])
            np.add.at(Hll, li[ml], Hl)
            np.add.at(gl, li[ml], g_l[ml])
        both = mp & ml
        if both.any():
            Hpl = np.einsum("mki,mkj->mij", Jp[both], Jl[both])
            rows = off[both][:, None] + np.arange(6)
            cols = 3 * li[both][:, None] + np.arange(3)
            np.add.at(Hcl, (rows[:, :, None], cols[:, None, :]), Hpl)
        return cost
