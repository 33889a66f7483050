import json

import numpy as np
import pytest

from avins.config import config_from_dict, load_config, parse_extrinsics, parse_rotation
from avins.errors import ConfigError
from avins.factors import ExtrinsicSet
from avins.geometry import exp_so3
from avins.simulator import default_extrinsics


def write(tmp_path, text):
    path = tmp_path / "cfg.yaml"
    path.write_text(text)
    return path


def test_defaults_without_file():
    cfg = load_config(None)
    assert cfg.estimator.window == 10 and cfg.calibration.keyframes == 100
    assert cfg.estimator_extrinsics == "rig" and cfg.evaluation_tolerance == 5e-3


def test_full_document(tmp_path):
    cfg = load_config(write(tmp_path, """
seed: 7
simulation:
  trajectory: {kind: circle, duration: 12.5, radius: 3.0}
  rig:
    imu_rate: 200
    noise: {sigma_d: 0.02, gyro_bias: [0.01, 0.0, 0.0]}
    geometry: {alpha_deg: [67.5, 67.5, 68.5, 67.5]}
    extrinsics: {R_ID: [0.0, 0.0, 0.1], p_ID: [0.1, 0.0, 0.0]}
  world: {n_landmarks: 200}
  dropout: [[2.0, 4.0]]
estimator:
  window: 6
  keyframe_stride: 4
  extrinsics: identity
  solver: {max_iterations: 5}
calibration:
  keyframes: 50
  stride: 2
  settings: {bias_mode: per_keyframe, sigma_d: 0.02}
misalignment:
  settings: {knot_spacing: 1.5}
evaluation:
  tolerance: 0.01
"""))
    sim = cfg.simulation
    assert cfg.seed == 7 and sim.trajectory.kind == "circle" and sim.trajectory.radius == 3.0
    assert sim.rig.imu_rate == 200 and sim.rig.noise.sigma_d == 0.02
    assert np.rad2deg(sim.rig.geometry.alpha[2]) == pytest.approx(68.5)
    assert np.allclose(sim.rig.extrinsics.T_ID.rotation, exp_so3([0.0, 0.0, 0.1]))
    assert sim.world.n_landmarks == 200 and sim.dropout == [(2.0, 4.0)]
    assert cfg.estimator.window == 6 and cfg.estimator.solver.max_iterations == 5
    assert cfg.estimator.solver.cost_tolerance == 1e-4
    assert cfg.estimator_extrinsics == "identity"
    assert cfg.calibration.settings.bias_mode == "per_keyframe" and cfg.calibration.stride == 2
    assert cfg.misalignment.settings.knot_spacing == 1.5
    assert cfg.evaluation_tolerance == 0.01


def test_yaml_error_has_line_number(tmp_path):
    path = write(tmp_path, "seed: 1\nestimator:\n  window: [1, 2\n")
    with pytest.raises(ConfigError, match=r"cfg\.yaml:\d+: invalid YAML"):
        load_config(path)


@pytest.mark.parametrize("doc, match", [
    ({"unknown": 1}, "unknown sections"),
    ({"estimator": {"windw": 3}}, "unknown keys"),
    ({"estimator": {"window": 1}}, "window"),
    ({"simulation": {"trajectory": {"kind": "helix"}}}, "helix"),
    ({"calibration": {"settings": {"bias_mode": "per_axis"}}}, "bias mode"),
    ({"seed": "abc"}, "seed"),
    ({"evaluation": {"tol": 1}}, "tolerance"),
])
def test_invalid_documents(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_rotation_forms():
    R = exp_so3([0.1, 0.2, 0.3])
    assert np.allclose(parse_rotation([0.1, 0.2, 0.3], "r"), R)
    assert np.allclose(parse_rotation(R.tolist(), "r"), R)
    with pytest.raises(ConfigError):
        parse_rotation(np.diag([1.0, 1.0, -1.0]).tolist(), "r")
    with pytest.raises(ConfigError):
        parse_rotation([1.0, 2.0], "r")


def test_extrinsic_sources(tmp_path):
    rig = default_extrinsics()
    assert parse_extrinsics("rig", "e", rig) is rig
    assert np.allclose(parse_extrinsics("identity", "e", rig).T_ID.rotation, np.eye(3))
    path = tmp_path / "calib.json"
    path.write_text(json.dumps({"extrinsics": rig.to_dict()}))
    loaded = parse_extrinsics(str(path), "e")
    assert np.allclose(loaded.T_DC.translation, rig.T_DC.translation)
    assert np.allclose(loaded.R_IC, rig.R_IC)
    with pytest.raises(ConfigError):
        parse_extrinsics("rig", "e")
    with pytest.raises(ConfigError):
        parse_extrinsics(str(tmp_path / "nope.json"), "e")
    with pytest.raises(ConfigError):
        parse_extrinsics({"R_XY": [0, 0, 0]}, "e")


def test_partial_mapping_keeps_base():
    rig = default_extrinsics()
    E = parse_extrinsics({"p_DC": [1.0, 2.0, 3.0]}, "e", rig)
    assert isinstance(E, ExtrinsicSet)
    assert np.allclose(E.T_DC.translation, [1.0, 2.0, 3.0])
    assert np.allclose(E.T_ID.rotation, rig.T_ID.rotation)
