import numpy as np
import pytest

from avins.calibration import (
    CalibrationData,
    CalibrationSession,
    CalibrationSettings,
    ExtrinsicStage,
    MisalignmentSession,
    VelocityKnots,
    check_excitation,
    extrinsic_errors,
    knot_grid,
    misalignment_transducer_opt,
    vision_only_ba,
)
from avins.dvl import TransducerGeometry
from avins.errors import DegenerateMotion, InsufficientExcitation, TooFewObservations
from avins.factors import ExtrinsicSet
from avins.geometry import RigidTransform, exp_so3, log_so3
from avins.simulator import NoiseSpec, SensorRig, TrajectorySpec, generate

RICH_ROTATION = dict(rotation_amplitude=(0.3, 0.3, 0.6), rotation_frequency=(0.4, 0.3, 0.15))
N_KEYFRAMES, STRIDE = 40, 6
OFFSET_RIG = ExtrinsicSet(
    RigidTransform(exp_so3([0.05, -0.03, 0.08]), [0.1, -0.05, 0.2]),
    RigidTransform(exp_so3(np.deg2rad([-4.0, 3.0, 5.0])), [0.05, 0.15, -0.1]),
)


def calibration_dataset(extrinsics=None, noise=None, attitude=(0.0, 0.0, 0.0), seed=0):
    rig = SensorRig(extrinsics=extrinsics or OFFSET_RIG, noise=noise or NoiseSpec.noiseless())
    spec = TrajectorySpec(duration=N_KEYFRAMES * STRIDE / 20 + 1, attitude_offset=attitude, **RICH_ROTATION)
    return generate(spec, rig, seed=seed)


def session_for(ds, n=N_KEYFRAMES, stride=STRIDE, settings=None):
    return CalibrationSession(CalibrationData.from_dataset(ds, n, stride), settings)


@pytest.fixture(scope="module")
def identity_rig_data():
    return calibration_dataset(ExtrinsicSet())


@pytest.fixture(scope="module")
def biased_data():
    return calibration_dataset(noise=NoiseSpec(0, 0, 0, 0, 0, 0, gyro_bias=(0.01, -0.01, 0.01)))


def pose_rmse(poses, ds, idx):
    return np.sqrt(np.mean([np.sum((T.translation - ds.gt.p[k]) ** 2) for T, k in zip(poses, idx)]))


# ---------------------------------------------------------------------------
# Vision-only bundle adjustment


def test_vision_ba_noiseless_recovers_poses(identity_rig_data):
    ds = identity_rig_data
    idx = np.arange(0, 20 * STRIDE, STRIDE)
    res = vision_only_ba([ds.frames[k] for k in idx], ds.rig.camera)
    for T, k in zip(res.poses, idx):
        assert np.linalg.norm(T.translation - ds.gt.p[k]) < 1e-8
        assert np.linalg.norm(log_so3(T.rotation.T @ ds.gt.R[k])) < 1e-8


def test_vision_ba_error_scales_with_pixel_noise():
    idx = np.arange(0, 20 * STRIDE, STRIDE)
    rmse = {}
    for sigma in (1.0, 0.5):
        errs = []
        for seed in range(3):
            ds = generate(TrajectorySpec(duration=7.0), SensorRig(noise=NoiseSpec(pixel_sigma=sigma)), seed=seed)
            res = vision_only_ba([ds.frames[k] for k in idx], ds.rig.camera, pixel_sigma=sigma)
            errs.append(pose_rmse(res.poses, ds, idx))
        rmse[sigma] = np.sqrt(np.mean(np.square(errs)))
    assert 0.35 < rmse[0.5] / rmse[1.0] < 0.65


@pytest.mark.parametrize("n", [0, 1])
def test_vision_ba_needs_two_keyframes(identity_rig_data, n):
    with pytest.raises(TooFewObservations):
        vision_only_ba(identity_rig_data.frames[:n], identity_rig_data.rig.camera)


# ---------------------------------------------------------------------------
# Extrinsic stages


def test_extrinsic_init_identity_rig(identity_rig_data):
    s = session_for(identity_rig_data)
    s.vision_ba()
    err = extrinsic_errors(s.extrinsic_init(), identity_rig_data.rig.extrinsics)
    assert err["R_ID"] < 1e-3 and err["R_DC"] < 1e-3
    assert err["R_IC"] < 1e-6


def test_extrinsic_init_offset_rig():
    ds = calibration_dataset()
    s = session_for(ds)
    s.vision_ba()
    err = extrinsic_errors(s.extrinsic_init(), ds.rig.extrinsics)
    assert err["R_ID"] < 1e-3 and err["R_IC"] < 1e-5


def test_bias_refine_zero_bias(identity_rig_data):
    s = session_for(identity_rig_data)
    s.vision_ba()
    s.extrinsic_init()
    _, bias = s.extrinsic_refine_with_bias()
    assert np.abs(bias).max() < 1e-4


def test_bias_refine_recovers_gyro_bias(biased_data):
    s = session_for(biased_data)
    s.vision_ba()
    s.extrinsic_init()
    _, bias = s.extrinsic_refine_with_bias()
    truth = np.array([0.01, -0.01, 0.01])
    assert np.all(np.abs(bias[0] - truth) < 0.05 * np.abs(truth))


def test_stage_errors_do_not_increase(biased_data):
    ds = biased_data
    s = session_for(ds)
    errs = []
    for stage in (s.vision_ba, s.extrinsic_init, s.extrinsic_refine_with_bias, s.gravity_init, s.full_refine):
        stage()
        errs.append(extrinsic_errors(s.extrinsics, ds.rig.extrinsics)["R_ID"])
    assert all(b <= a * (1 + 1e-9) for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-4
    assert np.rad2deg(extrinsic_errors(s.extrinsics, ds.rig.extrinsics)["gravity_tilt"]) < 0.1


@pytest.mark.parametrize("yaw", [0.0, 1.0])
def test_gravity_init_is_yaw_invariant(yaw):
    ds = calibration_dataset(attitude=(np.deg2rad(3.0), np.deg2rad(-2.0), yaw))
    s = session_for(ds)
    s.vision_ba()
    s.extrinsic_init()
    s.extrinsic_refine_with_bias()
    s.gravity_init()
    assert np.rad2deg(extrinsic_errors(s.extrinsics, ds.rig.extrinsics)["gravity_tilt"]) < 0.1
    pb = s.build_full_problem(approximate=False)
    rotated = dict(pb.values, R_WI0=exp_so3([0.0, 0.0, 0.7]) @ pb.values["R_WI0"])
    assert pb.cost(rotated) == pytest.approx(pb.cost(), rel=1e-9, abs=1e-12)


def test_extrinsic_init_with_gyro_bias_is_close(biased_data):
    s = session_for(biased_data)
    s.vision_ba()
    assert extrinsic_errors(s.extrinsic_init(), biased_data.rig.extrinsics)["R_ID"] < 0.05


def test_gravity_init_on_static_sequence():
    ds = generate(TrajectorySpec("static", duration=8.0, attitude_offset=(0.04, -0.03, 0.5)),
                  SensorRig(noise=NoiseSpec()), seed=3)
    s = session_for(ds, n=30, stride=4)
    s.vision_ba()
    s.extrinsics = ExtrinsicSet(ds.rig.extrinsics.T_ID, ds.rig.extrinsics.T_DC)
    s.stage = ExtrinsicStage.EXTRINSIC_BIAS_REFINE
    s.gravity_init()
    assert np.rad2deg(extrinsic_errors(s.extrinsics, ds.rig.extrinsics)["gravity_tilt"]) < 0.5


def test_stages_must_run_in_order(identity_rig_data):
    s = session_for(identity_rig_data)
    with pytest.raises(RuntimeError):
        s.extrinsic_init()
    s.vision_ba()
    with pytest.raises(RuntimeError):
        s.gravity_init()


def test_static_scenario_lacks_excitation():
    ds = generate(TrajectorySpec("static", duration=8.0), SensorRig(noise=NoiseSpec.noiseless()), seed=0)
    data = CalibrationData.from_dataset(ds, 30, 4)
    with pytest.raises(InsufficientExcitation):
        check_excitation(data, ds.rig.geometry)
    with pytest.raises(InsufficientExcitation):
        CalibrationSession(data).run()


@pytest.mark.parametrize("n", [5, 101])
def test_keyframe_buffer_limits(identity_rig_data, n):
    times = np.arange(n) * 0.1
    data = CalibrationData(times, [identity_rig_data.frames[0]] * n, identity_rig_data.imu,
                           identity_rig_data.dvl_t, identity_rig_data.dvl_beams, identity_rig_data.rig.camera)
    with pytest.raises(TooFewObservations):
        CalibrationSession(data)


# ---------------------------------------------------------------------------
# Transducer misalignment

MIS_KEYFRAMES, MIS_STRIDE, MIS_KNOTS = 50, 2, 0.25


def misalignment_session(geometry, duration_pad=1.0, shift=0.0, kind="lissajous"):
    rig = SensorRig(noise=NoiseSpec.noiseless(), geometry=geometry)
    spec = TrajectorySpec(kind, duration=MIS_KEYFRAMES * MIS_STRIDE / 20 + duration_pad)
    ds = generate(spec, rig, seed=0)
    if shift:
        ds = ds.with_time_shift(shift)
    data = CalibrationData.from_dataset(ds, MIS_KEYFRAMES, MIS_STRIDE)
    return ds, MisalignmentSession(data, ds.rig.extrinsics, CalibrationSettings(knot_spacing=MIS_KNOTS))


def alpha3_offset():
    nom = TransducerGeometry.nominal()
    return TransducerGeometry(nom.alpha + np.deg2rad([0.0, 0.0, 1.0, 0.0]), nom.beta)


@pytest.fixture(scope="module")
def alpha3_run():
    ds, ms = misalignment_session(alpha3_offset())
    return ds, ms, ms.run()


def test_knot_grid_covers_span():
    k = knot_grid(1.0, 3.1, 0.5)
    assert k[0] < 1.0 and k[1] == pytest.approx(1.0) and k[-2] >= 3.1 and k[-1] > 3.1
    assert np.allclose(np.diff(k), 0.5)


def test_noiseless_velocity_knots(alpha3_run):
    ds, ms, _ = alpha3_run
    kn = ms.knots
    t = ds.dvl_t[kn.sample_index]
    truth = np.column_stack([np.interp(t, ds.gt.t, ds.gt.v[:, a]) for a in range(3)])
    assert np.abs(kn.sample_v - truth).max() < 1e-4


def test_alpha3_misalignment_recovered(alpha3_run):
    _, _, est = alpha3_run
    err = np.rad2deg(est.geometry.as_vector() - alpha3_offset().as_vector()).reshape(4, 2)
    assert abs(err[2, 0]) < 0.05
    others = np.delete(err.reshape(8), 4)
    assert np.abs(others).max() < 0.02


def test_zero_misalignment_converges_to_nominal():
    nom = TransducerGeometry.nominal()
    _, ms = misalignment_session(nom)
    est = ms.run()
    assert np.rad2deg(np.abs(est.geometry.as_vector() - nom.as_vector())).max() < 0.02


def test_misalignment_time_shift_invariance(alpha3_run):
    _, ms = misalignment_session(alpha3_offset(), shift=250.0)
    est = ms.run()
    assert np.abs(est.geometry.as_vector() - alpha3_run[2].geometry.as_vector()).max() < 1e-6


def test_stationary_velocity_knots_vanish():
    _, ms = misalignment_session(TransducerGeometry.nominal(), kind="static")
    ms.vision_ba()
    kn = ms.body_velocity_opt()
    assert np.abs(kn.v).max() < 1e-6


def test_body_velocity_fast_path_matches_full_path():
    _, a = misalignment_session(TransducerGeometry.nominal())
    _, b = misalignment_session(TransducerGeometry.nominal())
    a.vision_ba()
    b.vision_ba()
    fast, full = a.body_velocity_opt(approximate=True), b.body_velocity_opt(approximate=False)
    assert np.abs(fast.v - full.v).max() < 1e-6


def test_vertical_only_velocity_is_degenerate(alpha3_run):
    _, ms, _ = alpha3_run
    kn = ms.knots
    z_only = np.zeros_like(kn.sample_v)
    z_only[:, 2] = np.linspace(0.1, 0.5, len(z_only))
    with pytest.raises(DegenerateMotion):
        misalignment_transducer_opt(ms, VelocityKnots(kn.t, kn.v, kn.sample_index, z_only))


def test_misalignment_stages_must_run_in_order():
    _, ms = misalignment_session(TransducerGeometry.nominal(), duration_pad=0.5)
    with pytest.raises(RuntimeError):
        ms.transducer_opt()
