"""End-to-end acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict with the measured numbers;
the verdicts are repeated in the terminal summary of the pytest run.
Monte-Carlo criteria use seeds 0-9.
"""

import copy
import time

import numpy as np
import pytest
from oracles import naive_preintegration, smooth_signals

from avins.calibration import (
    CalibrationData,
    CalibrationSession,
    CalibrationSettings,
    MisalignmentSession,
    extrinsic_errors,
    joint_one_shot,
)
from avins.dvl import (
    BodyVelocity,
    TransducerGeometry,
    body_velocity_covariance,
    projection_vectors,
    solve_body_velocities,
    solve_body_velocity,
    synthesize_transducer_velocities,
)
from avins.estimator import EstimatorConfig, run_estimator
from avins.evaluation import PoseSeries, evaluate, evaluate_estimate
from avins.factors import (
    CameraObservation,
    ExtrinsicSet,
    dvl_translation_residual,
    dvl_velocity_residual,
    imu_rotation_residual,
    imu_translation_residual,
    imu_velocity_residual,
    reprojection_residual,
)
from avins.geometry import RigidTransform, exp_so3, log_so3
from avins.jacobians import JACOBIAN_TOLERANCE, check_all
from avins.preintegration import (
    ImuBias,
    ImuStream,
    build_steps,
    dvl_step_weights,
    integrate_dvl,
    preintegrate_imu,
)
from avins.simulator import NoiseSpec, SensorRig, TrajectorySpec, WorldSpec, degrade_vision, generate

pytestmark = pytest.mark.slow

SEEDS = range(10)
RICH = dict(rotation_amplitude=(0.3, 0.3, 0.6), rotation_frequency=(0.4, 0.3, 0.15))


@pytest.fixture
def verdict(request):
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert passed, line

    return record


def deg(x):
    return float(np.rad2deg(x))


def rotation_error(E, E_true):
    e = extrinsic_errors(E, E_true)
    return max(e["R_ID"], e["R_DC"]), max(e["p_ID"], e["p_DC"])


# ---------------------------------------------------------------------------
# 1. Jacobians


def test_criterion_01_jacobians(verdict):
    t0 = time.perf_counter()
    results = check_all(n_points=20, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_relative_error)
    ok = all(r.passed and r.n_points >= 20 for r in results) and elapsed < 30.0
    verdict(1, ok, f"{len(results)} Jacobian checks x 20 points, worst {worst.name} "
                   f"{worst.max_relative_error:.1e} < {JACOBIAN_TOLERANCE:.0e}, {elapsed:.1f} s < 30 s")


# ---------------------------------------------------------------------------
# 2. Pre-integration against a fine-step integrator


def test_criterion_02_preintegration_oracle(verdict):
    t0 = time.perf_counter()
    worst = {"rot": 0.0, "vel": 0.0, "pos": 0.0, "dvl": 0.0}
    R_ID = exp_so3([0.1, -0.2, 0.3])
    for seed in range(3):
        omega, accel, velocity = smooth_signals(seed)
        duration, dt = 1.0, 1e-3
        t = np.linspace(0.0, duration, int(round(duration / dt)) + 1)
        pre = preintegrate_imu(build_steps(ImuStream(t, omega(t), accel(t)), 0.0, duration), ImuBias())
        v_mid = 0.5 * (velocity(t[:-1]) + velocity(t[1:]))
        pd = integrate_dvl(pre.gyro, v_mid, R_ID)
        R, dv, dp, dpd = naive_preintegration(omega, accel, velocity, duration, 1e-5, R_ID)
        worst["rot"] = max(worst["rot"], np.linalg.norm(pre.delta_R - R))
        worst["vel"] = max(worst["vel"], np.abs(pre.delta_v - dv).max())
        worst["pos"] = max(worst["pos"], np.abs(pre.delta_p - dp).max())
        worst["dvl"] = max(worst["dvl"], np.abs(pd.delta_p_bar - dpd).max())
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and elapsed < 60.0
    verdict(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (< 1e-5), {elapsed:.1f} s < 60 s")


# ---------------------------------------------------------------------------
# 3. DVL closed form


def test_criterion_03_dvl_closed_form(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        geom = TransducerGeometry(rng.uniform(0.6, 1.4, 4), rng.uniform(0.3, 1.2, 4))
        E = projection_vectors(geom)
        m = synthesize_transducer_velocities(rng.normal(size=3), geom, 0.01, rng)
        dense, *_ = np.linalg.lstsq(E, m.v, rcond=None)
        worst = max(worst, np.abs(solve_body_velocity(m, E).v - dense).max())
    geom = TransducerGeometry.nominal()
    E = projection_vectors(geom)
    sigma = 0.01
    v_true = np.array([0.3, -0.2, 0.1])
    draws = np.array([synthesize_transducer_velocities(v_true, geom, sigma, rng).v for _ in range(10_000)])
    emp = np.cov(solve_body_velocities(draws, E).T)
    ref = body_velocity_covariance(E, sigma)
    diag_err = np.abs(np.diag(emp) / np.diag(ref) - 1.0).max()
    frob_err = np.linalg.norm(emp - ref) / np.linalg.norm(ref)
    ok = worst < 1e-10 and diag_err < 0.1 and frob_err < 0.1
    verdict(3, ok, f"closed form vs lstsq {worst:.1e} < 1e-10; covariance diagonal {diag_err:.1%}, "
                   f"Frobenius {frob_err:.1%} (< 10%, 10000 draws)")


# ---------------------------------------------------------------------------
# 4. Residuals at noiseless ground truth


def residuals_at_truth(ds):
    E = ds.rig.extrinsics
    G = projection_vectors(ds.rig.geometry)
    v_dvl = solve_body_velocities(ds.dvl_beams, G)
    landmarks = dict(zip(ds.landmark_ids.tolist(), ds.landmarks_c0))
    worst = {}

    def keep(name, r):
        worst[name] = max(worst.get(name, 0.0), float(np.abs(r).max()))

    for k in range(len(ds.frames)):
        s = ds.gt.state(k)
        f = ds.frames[k]
        for lid, meas in zip(f.ids[:20], f.meas[:20]):
            obs = CameraObservation(k, int(lid), meas[:2], float(meas[2]))
            keep("reprojection", reprojection_residual(s, landmarks[int(lid)], obs, ds.rig.camera)[0])
        j = np.flatnonzero(np.isclose(ds.dvl_t, f.t))
        if j.size:
            keep("dvl_velocity", dvl_velocity_residual(s, BodyVelocity(v_dvl[j[0]]))[0])
        if k + 1 == len(ds.frames):
            break
        steps = build_steps(ds.imu, f.t, ds.frames[k + 1].t, extra_cuts=ds.dvl_t)
        pre = preintegrate_imu(steps, ImuBias())
        idx, W = dvl_step_weights(steps.t, ds.dvl_t, "cubic")
        pd = integrate_dvl(pre.gyro, v_dvl[idx], E.T_ID.rotation, W)
        sj = ds.gt.state(k + 1)
        keep("imu_rotation", imu_rotation_residual(s, sj, E, pre)[0])
        keep("imu_velocity", imu_velocity_residual(s, sj, E, pre)[0])
        keep("imu_translation", imu_translation_residual(s, sj, E, pre)[0])
        keep("dvl_translation", dvl_translation_residual(s, sj, E, pd)[0])
    return worst


def test_criterion_04_residual_consistency(verdict):
    rig = SensorRig(noise=NoiseSpec.noiseless())
    worst = {}
    for kind in ("static", "circle", "lissajous"):
        ds = generate(TrajectorySpec(kind, duration=20.0), rig, seed=1)
        worst[kind] = max(residuals_at_truth(ds).values())
    ok = max(worst.values()) <= 1e-5
    verdict(4, ok, "max residual at truth " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<= 1e-5)")


# ---------------------------------------------------------------------------
# 5. Extrinsic calibration from identity


def calibration_run(seed, noisy, extrinsics=None):
    rig = SensorRig(noise=NoiseSpec() if noisy else NoiseSpec.noiseless(),
                    **({"extrinsics": extrinsics} if extrinsics is not None else {}))
    ds = generate(TrajectorySpec(duration=31.0, **RICH), rig, seed=seed)
    data = CalibrationData.from_dataset(ds, 100, 6)
    return ds, data


def test_criterion_05_extrinsic_calibration(verdict):
    t0 = time.perf_counter()
    ds, data = calibration_run(0, noisy=False)
    s = CalibrationSession(data)
    clean_rot, clean_trans = rotation_error(s.run(), ds.rig.extrinsics)
    clean_ok = clean_rot < 1e-3 and clean_trans < 0.01
    passes, worst = 0, (0.0, 0.0)
    for seed in SEEDS:
        ds, data = calibration_run(seed, noisy=True)
        r, p = rotation_error(CalibrationSession(data).run(), ds.rig.extrinsics)
        passes += deg(r) < 0.5 and p < 0.03
        worst = (max(worst[0], deg(r)), max(worst[1], p))
    elapsed = time.perf_counter() - t0
    ok = clean_ok and passes >= 9 and elapsed < 300.0
    verdict(5, ok, f"noiseless rot {clean_rot:.1e} rad (< 1e-3), trans {clean_trans * 100:.3f} cm (< 1); "
                   f"noisy {passes}/10 within 0.5 deg / 3 cm (worst {worst[0]:.3f} deg, {worst[1] * 100:.2f} cm); "
                   f"{elapsed:.0f} s < 300 s")


# ---------------------------------------------------------------------------
# 6. DVL transducer misalignment


def misalignment_error(seed, noisy):
    signs = np.random.default_rng(100 + seed)
    truth = TransducerGeometry(np.deg2rad(67.5 + signs.choice([-1.0, 1.0], 4)),
                               np.deg2rad(45.0 + signs.choice([-1.0, 1.0], 4)))
    rig = SensorRig(noise=NoiseSpec() if noisy else NoiseSpec.noiseless(), geometry=truth)
    spec = TrajectorySpec(duration=51.0, amplitude=(12.0, 8.0, 0.6))
    ds = generate(spec, rig, WorldSpec(n_landmarks=3000, altitude=4.0), seed=seed)
    data = CalibrationData.from_dataset(ds, 100, 10)
    est = MisalignmentSession(data, ds.rig.extrinsics, CalibrationSettings(knot_spacing=1.5)).run()
    return deg(np.abs(est.geometry.as_vector() - truth.as_vector()).max())


def test_criterion_06_dvl_misalignment(verdict):
    clean = [misalignment_error(seed, False) for seed in SEEDS]
    noisy = [misalignment_error(seed, True) for seed in SEEDS]
    clean_pass = sum(e < 0.1 for e in clean)
    noisy_pass = sum(e < 0.3 for e in noisy)
    ok = clean_pass >= 9 and noisy_pass >= 9
    verdict(6, ok, f"noiseless {clean_pass}/10 within 0.1 deg (worst {max(clean):.3f}), "
                   f"noisy {noisy_pass}/10 within 0.3 deg (worst {max(noisy):.3f}, median {np.median(noisy):.3f})")


# ---------------------------------------------------------------------------
# 7. Staged pipeline against one-shot joint optimization


def offset_rig(seed):
    rng = np.random.default_rng(seed)

    def rot30():
        axis = rng.normal(size=3)
        return exp_so3(axis / np.linalg.norm(axis) * np.deg2rad(30.0))

    return ExtrinsicSet(RigidTransform(rot30(), [0.1, -0.05, 0.2]), RigidTransform(rot30(), [0.05, 0.15, -0.1]))


def test_criterion_07_staged_beats_joint(verdict):
    wins, rows = 0, []
    for seed in SEEDS:
        ds, data = calibration_run(seed, noisy=True, extrinsics=offset_rig(seed))
        s = CalibrationSession(data)
        staged, _ = rotation_error(s.run(), ds.rig.extrinsics)
        joint = joint_one_shot(data, bundle=s.bundle)
        joint_err, _ = rotation_error(joint.extrinsics, ds.rig.extrinsics)
        win = joint.failed or staged < joint_err
        wins += win
        rows.append(f"{deg(staged):.2f}/{'fail' if joint.failed else f'{deg(joint_err):.1f}'}")
    verdict(7, wins >= 8, f"staged better in {wins}/10 (>= 8); staged/joint rotation error deg: {' '.join(rows)}")


# ---------------------------------------------------------------------------
# 8. Fast linear approximation in the full refinement


def test_criterion_08_fast_approximation(verdict):
    ds, data = calibration_run(0, noisy=True)
    s = CalibrationSession(data)
    s.vision_ba()
    s.extrinsic_init()
    s.extrinsic_refine_with_bias()
    s.gravity_init()
    timings = {True: [], False: []}
    final = {}
    for _ in range(2):
        for approximate in (True, False):
            run = copy.deepcopy(s)
            run.full_refine(approximate=approximate)
            rec = run.records[-1]
            timings[approximate].append(rec.wall_time)
            final[approximate] = (run.extrinsics, rec.extra["approx_hits"])
    Ea, hits = final[True]
    Eb, _ = final[False]
    drot = max(np.linalg.norm(log_so3(Ea.T_ID.rotation.T @ Eb.T_ID.rotation)),
               np.linalg.norm(log_so3(Ea.T_DC.rotation.T @ Eb.T_DC.rotation)),
               np.linalg.norm(log_so3(Ea.R_WI0.T @ Eb.R_WI0)))
    dtrans = max(np.linalg.norm(Ea.T_ID.translation - Eb.T_ID.translation),
                 np.linalg.norm(Ea.T_DC.translation - Eb.T_DC.translation))
    ta, tb = min(timings[True]), min(timings[False])
    ok = ta < tb and drot < 1e-5 and dtrans < 1e-5 and hits > 0
    verdict(8, ok, f"wall time {ta:.2f} s approximate vs {tb:.2f} s re-integrated; "
                   f"difference {drot:.1e} rad / {dtrans:.1e} m (< 1e-5); approximation hits {hits}")


# ---------------------------------------------------------------------------
# 9. Camera dropout


DROPOUT = [(20.0, 40.0)]


def dropout_ratio(ds, use_dvl):
    cfg = EstimatorConfig(keyframe_stride=10, extrinsics=ds.rig.extrinsics, use_dvl=use_dvl)
    full = evaluate_estimate(run_estimator(ds, cfg), ds.gt).translation_rmse
    dropped = evaluate_estimate(run_estimator(degrade_vision(ds, DROPOUT), cfg), ds.gt).translation_rmse
    return dropped / full


def test_criterion_09_dropout_robustness(verdict):
    ratios, vi_ratios = [], []
    for seed in SEEDS:
        ds = generate(TrajectorySpec(duration=60.0), SensorRig(), seed=seed)
        ratios.append(dropout_ratio(ds, use_dvl=True))
        vi_ratios.append(dropout_ratio(ds, use_dvl=False))
    ratios, vi_ratios = np.array(ratios), np.array(vi_ratios)
    bounded = int(np.sum(ratios < 3.0))
    worse = int(np.sum(vi_ratios > ratios))
    ok = bounded == 10 and worse >= 9
    verdict(9, ok, f"RMSE ratio dropout/no-dropout with DVL max {ratios.max():.2f} (< 3 in {bounded}/10); "
                   f"visual-inertial only median {np.median(vi_ratios):.1f}, worse in {worse}/10 (>= 9)")


# ---------------------------------------------------------------------------
# 10. Estimation with and without calibrated extrinsics


def test_criterion_10_calibration_ablation(verdict):
    better, rows = 0, []
    for seed in SEEDS:
        ds, data = calibration_run(seed, noisy=True)
        calibrated = CalibrationSession(data).run()
        reports = []
        for E in (calibrated, ExtrinsicSet()):
            cfg = EstimatorConfig(keyframe_stride=10, extrinsics=E, gravity_init="accelerometer")
            reports.append(evaluate_estimate(run_estimator(ds, cfg), ds.gt))
        cal, raw = reports
        win = raw.translation_rmse > cal.translation_rmse and raw.rotation_rmse_deg > cal.rotation_rmse_deg
        better += win
        rows.append(f"{cal.translation_rmse:.3f}/{raw.translation_rmse:.3f}")
    verdict(10, better >= 9, f"uncalibrated worse in translation and rotation in {better}/10 (>= 9); "
                             f"translation RMSE m calibrated/uncalibrated: {' '.join(rows)}")


# ---------------------------------------------------------------------------
# 11. Evaluation alignment


def test_criterion_11_evaluation_alignment(verdict):
    ds = generate(TrajectorySpec(duration=20.0), SensorRig(noise=NoiseSpec.noiseless()), seed=0)
    gt = PoseSeries(ds.gt.t, ds.gt.R, ds.gt.p)
    R, p = exp_so3([0.7, -2.1, 1.3]), np.array([12.0, -4.0, 30.0])
    moved = PoseSeries(gt.t, np.einsum("ij,njk->nik", R, gt.R), gt.p @ R.T + p)
    rep = evaluate(moved, gt)
    ok = rep.translation_rmse < 1e-10 and rep.rotation_rmse_deg < 1e-8
    verdict(11, ok, f"rigidly moved ground truth: {rep.translation_rmse:.1e} m (< 1e-10), "
                    f"{rep.rotation_rmse_deg:.1e} deg (< 1e-8)")
