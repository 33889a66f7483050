import numpy as np
import pytest

from avins.dvl import BodyVelocity, TransducerGeometry, projection_vectors, solve_body_velocities
from avins.errors import BehindCamera
from avins.factors import (
    CameraModel,
    CameraObservation,
    ExtrinsicSet,
    GravityModel,
    KeyframeState,
    dvl_translation_residual,
    dvl_velocity_residual,
    imu_rotation_residual,
    imu_translation_residual,
    imu_velocity_residual,
    prior_residual,
    reprojection_residual,
)
from avins.geometry import RigidTransform, exp_so3
from avins.preintegration import (
    ImuBias,
    ImuStream,
    build_steps,
    dvl_step_weights,
    integrate_dvl,
    integrate_gyro,
    preintegrate_imu,
)
from avins.simulator import NoiseSpec, SensorRig, TrajectorySpec, generate


def state(R=np.eye(3), p=np.zeros(3), v=np.zeros(3)):
    return KeyframeState(np.asarray(R, float), np.asarray(p, float), np.asarray(v, float), ImuBias())


def test_dvl_velocity_residual_examples():
    r, J = dvl_velocity_residual(state(v=[0.1, 0.2, 0.3]), BodyVelocity(np.array([0.1, 0.2, 0.3])))
    assert np.allclose(r, 0)
    r, _ = dvl_velocity_residual(state(), BodyVelocity(np.array([1.0, 0, 0])))
    assert np.allclose(r, [1, 0, 0])
    assert np.allclose(J["v_i"], -np.eye(3))


def _static_steps(duration=1.0, R_WI=np.eye(3), g=9.81):
    t = np.linspace(0.0, duration, 201)
    f = R_WI.T @ np.array([0.0, 0.0, g])  # specific force measured at rest
    stream = ImuStream(t, np.zeros((201, 3)), np.tile(f, (201, 1)))
    return build_steps(stream, 0.0, duration)


def test_dvl_translation_identity_case():
    steps = _static_steps()
    _, _, gyro = integrate_gyro(steps, ImuBias())
    p = integrate_dvl(gyro, np.zeros((len(steps), 3)), np.eye(3))
    E = ExtrinsicSet(RigidTransform(exp_so3([0.1, 0, 0]), [0.1, 0.2, 0.3]), RigidTransform(), np.eye(3))
    r, _ = dvl_translation_residual(state(), state(), E, p)
    assert np.allclose(r, 0)


def test_imu_rotation_identity_for_any_camera_extrinsic():
    pre = preintegrate_imu(_static_steps(), ImuBias())
    R = exp_so3([0.3, -0.2, 0.5])
    E = ExtrinsicSet(RigidTransform(exp_so3([0.4, 0.1, -0.3])), RigidTransform(exp_so3([-0.2, 0.6, 0.1])))
    r, _ = imu_rotation_residual(state(R), state(R), E, pre)
    assert np.allclose(r, 0, atol=1e-14)


@pytest.mark.parametrize("residual", [imu_velocity_residual, imu_translation_residual])
def test_static_equilibrium(residual):
    E = ExtrinsicSet(RigidTransform(exp_so3([0.1, -0.2, 0.05]), [0.1, 0.0, -0.1]),
                     RigidTransform(exp_so3([0.0, 0.1, 0.2]), [0.0, 0.1, 0.0]),
                     exp_so3([0.05, -0.08, 0.0]))
    Rc = exp_so3([0.2, 0.1, -0.3])
    # IMU attitude in the world for a camera held at Rc in the first camera frame.
    R_WI = E.R_WI0 @ E.R_IC @ Rc @ E.R_IC.T
    pre = preintegrate_imu(_static_steps(R_WI=R_WI), ImuBias())
    r, _ = residual(state(Rc, [1, 2, 3]), state(Rc, [1, 2, 3]), E, pre, GravityModel())
    assert np.abs(r).max() < 1e-12


def test_reprojection_on_optical_axis():
    cam = CameraModel()
    obs = CameraObservation(0, 0, np.array([cam.cx, cam.cy]))
    r, J = reprojection_residual(state(), np.array([0.0, 0.0, 5.0]), obs, cam)
    assert np.allclose(r, 0)
    stereo = CameraObservation(0, 0, np.array([cam.cx, cam.cy]), u_right=cam.cx - cam.fx * cam.baseline / 5.0)
    r, _ = reprojection_residual(state(), np.array([0.0, 0.0, 5.0]), stereo, cam)
    assert np.allclose(r, 0)


def test_reprojection_behind_camera():
    with pytest.raises(BehindCamera):
        reprojection_residual(state(), np.array([0.0, 0.0, -1.0]), CameraObservation(0, 0, np.zeros(2)),
                              CameraModel())


def test_prior_residual_examples():
    T = (np.eye(3), np.array([1.0, 2.0, 3.0]))
    r, raw = prior_residual([T], [T], ["pose"], np.eye(6))
    assert np.allclose(r, 0)
    T2 = (exp_so3([0, 0, 0.1]), T[1])
    _, raw = prior_residual([T2], [T], ["pose"], np.eye(6))
    assert np.allclose(raw[:3], [0, 0, 0.1])
    r, _ = prior_residual([np.ones(3)], [np.zeros(3)], ["vector"], 4.0 * np.eye(3))
    assert np.allclose(r, 0.5)


def test_simulator_consistency_converges_with_rate():
    """Ground truth from a 1 kHz rig satisfies every residual to discretization level."""
    rig = SensorRig(noise=NoiseSpec.noiseless(), imu_rate=1000.0, dvl_rate=1000.0)
    ds = generate(TrajectorySpec(duration=2.0), rig, seed=4)
    E = ds.rig.extrinsics
    v_dvl = solve_body_velocities(ds.dvl_beams, projection_vectors(TransducerGeometry.nominal()))
    worst = {}
    for k in range(0, len(ds.frames) - 1, 5):
        t0, t1 = ds.frames[k].t, ds.frames[k + 1].t
        steps = build_steps(ds.imu, t0, t1, extra_cuts=ds.dvl_t)
        pre = preintegrate_imu(steps, ImuBias())
        idx, W = dvl_step_weights(steps.t, ds.dvl_t, "cubic")
        pd = integrate_dvl(pre.gyro, v_dvl[idx], E.T_ID.rotation, W)
        si, sj = ds.gt.state(k), ds.gt.state(k + 1)
        for name, fn in (("rot", imu_rotation_residual), ("vel", imu_velocity_residual),
                         ("pos", imu_translation_residual), ("dvl", dvl_translation_residual)):
            args = (si, sj, E, pd if name == "dvl" else pre)
            worst[name] = max(worst.get(name, 0.0), np.abs(fn(*args)[0]).max())
    assert worst["dvl"] < 1e-9
    assert worst["rot"] < 1e-9
    assert max(worst.values()) < 1e-8
