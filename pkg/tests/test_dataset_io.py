import json

import numpy as np
import pytest

from avins.dataset_io import read_dataset, read_ground_truth, read_trajectory, write_dataset, write_trajectory
from avins.errors import DataError, NonMonotoneTime
from avins.estimator import Mode, TrajectoryEstimate


@pytest.fixture
def written(tmp_path, lissajous_noisy):
    return write_dataset(lissajous_noisy, tmp_path / "ds"), lissajous_noisy


def test_round_trip_preserves_digest(written):
    path, ds = written
    back = read_dataset(path)
    assert back.digest() == ds.digest()
    assert np.array_equal(back.imu.accel, ds.imu.accel)
    assert np.array_equal(back.gt.p, ds.gt.p)
    assert back.rig.extrinsics.T_ID.translation.tolist() == ds.rig.extrinsics.T_ID.translation.tolist()


def test_stream_files_and_headers(written):
    path, ds = written
    assert sorted(p.name for p in path.iterdir()) == ["cam.jsonl", "dvl.jsonl", "gt.jsonl", "imu.jsonl",
                                                      "landmarks.jsonl"]
    head = json.loads((path / "imu.jsonl").read_text().splitlines()[0])["header"]
    assert head["stream"] == "imu" and head["seed"] == ds.seed and "units" in head and "rig" in head


def test_without_ground_truth(tmp_path, lissajous_noisy):
    path = write_dataset(lissajous_noisy, tmp_path / "blind", ground_truth=False)
    assert not (path / "gt.jsonl").exists()
    back = read_dataset(path)
    assert len(back.gt.t) == 0 and len(back.frames) == len(lissajous_noisy.frames)


def corrupt(path, line, text):
    lines = path.read_text().splitlines()
    lines[line - 1] = text
    path.write_text("\n".join(lines) + "\n")


def test_invalid_json_reports_file_and_line(written):
    path, _ = written
    corrupt(path / "dvl.jsonl", 4, "{not json")
    with pytest.raises(DataError, match=r"dvl\.jsonl:4: invalid JSON"):
        read_dataset(path)


def test_missing_field_reports_line(written):
    path, _ = written
    corrupt(path / "imu.jsonl", 3, json.dumps({"t": 0.5, "omega": [0, 0, 0]}))
    with pytest.raises(DataError, match=r"imu\.jsonl:3: missing field 'accel'"):
        read_dataset(path)


def test_non_monotone_time_reports_line(written):
    path, _ = written
    corrupt(path / "dvl.jsonl", 5, json.dumps({"t": 0.0, "beams": [0, 0, 0, 0]}))
    with pytest.raises(NonMonotoneTime, match=r"dvl\.jsonl:5"):
        read_dataset(path)


def test_wrong_header(written):
    path, _ = written
    corrupt(path / "cam.jsonl", 1, json.dumps({"header": {"format": "other"}}))
    with pytest.raises(DataError, match=r"cam\.jsonl:1"):
        read_dataset(path)


def test_missing_directory(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path / "absent")


def test_ground_truth_file_alone(written):
    path, ds = written
    gt = read_ground_truth(path / "gt.jsonl")
    assert np.array_equal(gt.R, ds.gt.R)


def test_trajectory_round_trip(tmp_path, rng):
    n = 5
    est = TrajectoryEstimate(np.arange(n) * 0.5, np.tile(np.eye(3), (n, 1, 1)), rng.normal(size=(n, 3)),
                             rng.normal(size=(n, 3)), rng.normal(size=(n, 6)),
                             [Mode.VISUAL, Mode.FALLBACK, Mode.FALLBACK, Mode.VISUAL, Mode.VISUAL])
    back = read_trajectory(write_trajectory(est, tmp_path / "traj.jsonl"))
    assert np.array_equal(back.p, est.p) and np.array_equal(back.bias, est.bias)
    assert back.modes == est.modes
