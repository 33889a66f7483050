"""Finite-difference verification of every analytic Jacobian.

Each check builds a random but well-conditioned configuration, evaluates
the analytic Jacobian and compares it with a central difference taken on
the manifold (through the variable kind's retraction). The reported number
is the worst relative block error

    max_b ||J_b - J_b^fd|| / max(||J_b||, 1e-3 ||J||)

so that tiny blocks are compared against the scale of the whole Jacobian
instead of their own size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .dvl import BodyVelocity
from .factors import (
    BiasRandomWalkFactor,
    CameraModel,
    DvlTranslationFactor,
    DvlVelocityFactor,
    ImuFactor,
    ProjectionFactors,
    ReprojectionFactor,
    SegmentVelocityFactor,
)
from .geometry import RigidTransform, exp_so3, log_so3, right_jacobian
from .optimizer import (
    BIAS,
    EXTRINSIC_ROTATION,
    EXTRINSIC_TRANSLATION,
    GRAVITY_ROTATION,
    LANDMARK,
    POSE,
    VELOCITY,
    PriorFactor,
    VarKind,
)
from .preintegration import (
    ImuBias,
    ImuNoise,
    ImuStream,
    build_steps,
    dvl_jacobian_wrt_extrinsic_rotation,
    dvl_step_weights,
    integrate_dvl,
    integrate_gyro,
    preintegrate_imu,
    reintegrate_dvl_bias,
    reintegrate_dvl_full,
    reintegrate_dvl_velocities,
)

logger = logging.getLogger(__name__)

STEP = 1e-6
JACOBIAN_TOLERANCE = 1e-5


@dataclass
class JacobianCheck:
    name: str
    max_relative_error: float
    n_points: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error < JACOBIAN_TOLERANCE


def relative_error(blocks: List[np.ndarray], fd_blocks: List[np.ndarray]) -> float:
    total = np.sqrt(sum(float(np.sum(b**2)) for b in blocks))
    floor = max(1e-3 * total, 1e-12)
    worst = 0.0
    for b, f in zip(blocks, fd_blocks):
        worst = max(worst, float(np.linalg.norm(b - f)) / max(float(np.linalg.norm(b)), floor))
    return worst


def numeric_jacobian(fun: Callable, x, kind: VarKind, h: float = STEP) -> np.ndarray:
    """Central difference of ``fun`` along the tangent space of ``kind`` at ``x``."""
    cols = []
    for i in range(kind.dim):
        d = np.zeros(kind.dim)
        d[i] = h
        cols.append((np.asarray(fun(kind.retract(x, d))) - np.asarray(fun(kind.retract(x, -d)))) / (2 * h))
    return np.column_stack(cols)


def factor_error(factor, values: dict, kinds: dict, h: float = STEP) -> float:
    """Worst relative block error of ``factor.linearize`` at ``values``."""
    _, blocks = factor.linearize(values, jacobians=True)
    ana, fd = [], []
    for key, block in zip(factor.keys, blocks):
        if key is None or block is None:
            continue

        def fun(x, key=key):
            v = dict(values)
            v[key] = x
            return factor.linearize(v, jacobians=False)[0]

        ana.append(np.asarray(block))
        fd.append(numeric_jacobian(fun, values[key], kinds[key], h))
    # Restore any cached linearization state touched by the perturbations.
    factor.linearize(values, jacobians=False)
    return relative_error(ana, fd)


# ---------------------------------------------------------------------------
# Random configurations


def _rand_rot(rng, scale=1.0) -> np.ndarray:
    return exp_so3(rng.normal(size=3) * scale)


def _imu_stream(rng, t0=0.0, t1=0.5, rate=200.0) -> ImuStream:
    t = np.arange(t0 - 0.05, t1 + 0.05 + 1e-9, 1.0 / rate)
    f = rng.uniform(0.5, 2.0, size=(2, 3))
    ph = rng.uniform(0, 2 * np.pi, size=(2, 3))
    omega = 0.4 * np.sin(np.outer(t, f[0]) + ph[0])
    accel = np.array([0.0, 0.0, 9.81]) + np.sin(np.outer(t, f[1]) + ph[1])
    return ImuStream(t, omega, accel)


def _dvl_pre(rng, stream: ImuStream, t0=0.0, t1=0.5, R_ID=None, bias=None):
    dvl_t = np.arange(t0 - 0.4, t1 + 0.4 + 1e-9, 0.2)
    steps = build_steps(stream, t0, t1, extra_cuts=dvl_t)
    idx, W = dvl_step_weights(steps.t, dvl_t, hold="cubic")
    v = rng.normal(size=(len(dvl_t), 3))[idx]
    b = bias if bias is not None else ImuBias(rng.normal(size=3) * 1e-3)
    _, _, gyro = integrate_gyro(steps, b, 1e-3)
    R = _rand_rot(rng) if R_ID is None else R_ID
    return integrate_dvl(gyro, v, R, weights=W, velocity_cov=np.eye(3) * 1e-4, gyro_density=1e-3), steps


def _extrinsic_values(rng) -> dict:
    return {
        "R_ID": _rand_rot(rng),
        "p_ID": rng.normal(size=3) * 0.2,
        "R_DC": _rand_rot(rng),
        "p_DC": rng.normal(size=3) * 0.3,
        "R_WI0": _rand_rot(rng),
    }


_EXTRINSIC_KINDS = {
    "R_ID": EXTRINSIC_ROTATION,
    "p_ID": EXTRINSIC_TRANSLATION,
    "R_DC": EXTRINSIC_ROTATION,
    "p_DC": EXTRINSIC_TRANSLATION,
    "R_WI0": GRAVITY_ROTATION,
}


def _pose(rng) -> RigidTransform:
    return RigidTransform(_rand_rot(rng), rng.normal(size=3))


# ---------------------------------------------------------------------------
# Individual checks


def check_imu(rng) -> float:
    stream = _imu_stream(rng)
    steps = build_steps(stream, 0.0, 0.5)
    b_lin = ImuBias(rng.normal(size=3) * 1e-2, rng.normal(size=3) * 1e-2)
    pre = preintegrate_imu(steps, b_lin, ImuNoise())
    values = _extrinsic_values(rng)
    values.update(Ti=_pose(rng), Tj=_pose(rng), vi=rng.normal(size=3), vj=rng.normal(size=3),
                  b=b_lin.vector() + rng.normal(size=6) * 1e-4)
    kinds = dict(_EXTRINSIC_KINDS, Ti=POSE, Tj=POSE, vi=VELOCITY, vj=VELOCITY, b=BIAS)
    f = ImuFactor("Ti", "Tj", "vi", "vj", "b", pre, reintegrate=False)
    return factor_error(f, values, kinds)


def _dvl_translation(rng, approximate: bool) -> float:
    stream = _imu_stream(rng)
    pre, _ = _dvl_pre(rng, stream)
    values = _extrinsic_values(rng)
    if approximate:
        # Stay inside the linear model's validity region around the stored R_ID.
        values["R_ID"] = exp_so3(rng.normal(size=3) * 2e-3) @ pre.extrinsic_lin
    values.update(Ti=_pose(rng), Tj=_pose(rng), b=np.concatenate([pre.bias_gyro_lin + rng.normal(size=3) * 1e-4,
                                                                   np.zeros(3)]))
    kinds = dict(_EXTRINSIC_KINDS, Ti=POSE, Tj=POSE, b=BIAS)
    f = DvlTranslationFactor("Ti", "Tj", "b", pre, approximate=approximate)
    return factor_error(f, values, kinds)


def check_dvl_translation(rng) -> float:
    return _dvl_translation(rng, approximate=False)


def check_dvl_translation_approx(rng) -> float:
    return _dvl_translation(rng, approximate=True)


def check_dvl_velocity(rng) -> float:
    f = DvlVelocityFactor("v", BodyVelocity(rng.normal(size=3), np.diag(rng.uniform(1e-4, 1e-2, 3))))
    return factor_error(f, {"v": rng.normal(size=3)}, {"v": VELOCITY})


def check_bias_walk(rng) -> float:
    f = BiasRandomWalkFactor("bi", "bj", 0.5, 1e-4, 1e-3)
    return factor_error(f, {"bi": rng.normal(size=6), "bj": rng.normal(size=6)}, {"bi": BIAS, "bj": BIAS})


def check_segment_velocity(rng) -> float:
    stream = _imu_stream(rng)
    pre, _ = _dvl_pre(rng, stream)
    keys = [f"v{m}" for m in range(len(pre.velocities))]
    values = {k: v + rng.normal(size=3) * 1e-3 for k, v in zip(keys, pre.velocities)}
    f = SegmentVelocityFactor(keys, pre, rng.normal(size=3), sigma=1e-2)
    return factor_error(f, values, {k: VELOCITY for k in keys})


def _camera_scene(rng, n: int):
    cam = CameraModel()
    T = _pose(rng)
    pts_c = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(3, 8, n)])
    lms = pts_c @ T.rotation.T + T.translation
    return cam, T, lms


def check_reprojection(rng) -> float:
    cam, T, lms = _camera_scene(rng, 1)
    stereo = rng.random() < 0.5
    meas = np.array([300.0, 200.0, 280.0]) if stereo else np.array([300.0, 200.0])
    f = ReprojectionFactor("T", "l", meas, cam, sigma=0.7)
    return factor_error(f, {"T": T, "l": lms[0]}, {"T": POSE, "l": LANDMARK})


def check_projection_batch(rng) -> float:
    cam, T0, lms = _camera_scene(rng, 6)
    T1 = RigidTransform(T0.rotation @ exp_so3(rng.normal(size=3) * 0.05), T0.translation + rng.normal(size=3) * 0.1)
    pose_keys = ["T0"] * 6 + ["T1"] * 6
    lm_keys = [f"l{i}" for i in range(6)] * 2
    meas = np.column_stack([rng.uniform(100, 500, 12), rng.uniform(100, 400, 12), rng.uniform(80, 480, 12)])
    f = ProjectionFactors(pose_keys, lm_keys, meas, cam, sigma=rng.uniform(0.5, 2.0, 12))
    values = {"T0": T0, "T1": T1, **{f"l{i}": lms[i] for i in range(6)}}
    kinds = {"T0": POSE, "T1": POSE, **{f"l{i}": LANDMARK for i in range(6)}}
    return factor_error(f, values, kinds)


def check_prior(rng) -> float:
    keys = ["T", "R", "g", "x"]
    kinds = [POSE, EXTRINSIC_ROTATION, GRAVITY_ROTATION, BIAS]
    means = [_pose(rng), _rand_rot(rng), _rand_rot(rng), rng.normal(size=6)]
    values = {
        "T": RigidTransform(means[0].rotation @ exp_so3(rng.normal(size=3) * 0.3), rng.normal(size=3)),
        "R": exp_so3(rng.normal(size=3) * 0.3) @ means[1],
        "g": exp_so3(np.r_[rng.normal(size=2) * 0.3, 0.0]) @ means[2],
        "x": rng.normal(size=6),
    }
    A = rng.normal(size=(17, 17))
    f = PriorFactor(keys, kinds, means, A + 5 * np.eye(17), offset=rng.normal(size=17) * 0.1)
    return factor_error(f, values, dict(zip(keys, kinds)))


def check_right_jacobian(rng) -> float:
    phi = rng.normal(size=3) * rng.uniform(0.01, 2.5)
    R0 = exp_so3(phi)
    # Exp(phi + d) = Exp(phi) Exp(Jr(phi) d) to first order.
    fd = numeric_jacobian(lambda x: log_so3(R0.T @ exp_so3(x)), phi, VarKind("v3", 3, lambda x, d: x + d, None))
    return relative_error([right_jacobian(phi)], [fd])


def check_dvl_extrinsic_rotation(rng) -> float:
    pre, _ = _dvl_pre(rng, _imu_stream(rng))
    fd = numeric_jacobian(lambda R: reintegrate_dvl_full(pre, R).delta_p_bar, pre.extrinsic_lin, EXTRINSIC_ROTATION)
    return relative_error([dvl_jacobian_wrt_extrinsic_rotation(pre)], [fd])


def check_dvl_body_velocity(rng) -> float:
    pre, _ = _dvl_pre(rng, _imu_stream(rng))
    ana, fd = [], []
    for m in range(len(pre.velocities)):
        def fun(vm, m=m):
            v = pre.velocities.copy()
            v[m] = vm
            return reintegrate_dvl_velocities(pre, v).delta_p_bar

        ana.append(pre.G[m])
        fd.append(numeric_jacobian(fun, pre.velocities[m], VELOCITY))
    return relative_error(ana, fd)


def check_dvl_gyro_bias(rng) -> float:
    pre, _ = _dvl_pre(rng, _imu_stream(rng))
    fd = numeric_jacobian(lambda bg: reintegrate_dvl_bias(pre, bg).delta_p_bar, pre.bias_gyro_lin, VELOCITY)
    return relative_error([pre.J_bg], [fd])


def check_imu_bias(rng) -> float:
    steps = build_steps(_imu_stream(rng), 0.0, 0.5)
    b0 = ImuBias(rng.normal(size=3) * 1e-2, rng.normal(size=3) * 1e-2)
    pre = preintegrate_imu(steps, b0)

    def fun(b):
        q = preintegrate_imu(steps, ImuBias.from_vector(b))
        return np.concatenate([log_so3(pre.delta_R.T @ q.delta_R), q.delta_v, q.delta_p])

    ana = np.zeros((9, 6))
    ana[0:3, 0:3] = pre.dR_dbg
    ana[3:6, 0:3], ana[3:6, 3:6] = pre.dv_dbg, pre.dv_dba
    ana[6:9, 0:3], ana[6:9, 3:6] = pre.dp_dbg, pre.dp_dba
    fd = numeric_jacobian(fun, b0.vector(), BIAS)
    return relative_error([ana[:, :3], ana[:, 3:]], [fd[:, :3], fd[:, 3:]])


CHECKS: Dict[str, Callable] = {
    "imu": check_imu,
    "dvl_translation": check_dvl_translation,
    "dvl_translation_approx": check_dvl_translation_approx,
    "dvl_velocity": check_dvl_velocity,
    "bias_walk": check_bias_walk,
    "segment_velocity": check_segment_velocity,
    "reprojection": check_reprojection,
    "projection_batch": check_projection_batch,
    "prior": check_prior,
    "right_jacobian": check_right_jacobian,
    "dvl_extrinsic_rotation": check_dvl_extrinsic_rotation,
    "dvl_body_velocity": check_dvl_body_velocity,
    "dvl_gyro_bias": check_dvl_gyro_bias,
    "imu_bias": check_imu_bias,
}


def check_all(n_points: int = 20, seed: int = 0, names=None) -> List[JacobianCheck]:
    """Run every check at ``n_points`` random configurations."""
    rng = np.random.default_rng(seed)
    out = []
    for name in names or CHECKS:
        fn = CHECKS[name]
        worst = max(fn(rng) for _ in range(n_points))
        logger.info("jacobian %-24s max relative error %.3e", name, worst)
        out.append(JacobianCheck(name, worst, n_points))
    return out
