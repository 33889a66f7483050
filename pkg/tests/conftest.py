import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from avins.simulator import NoiseSpec, SensorRig, TrajectorySpec, generate  # noqa: E402


def noiseless_rig(**kw) -> SensorRig:
    return SensorRig(noise=NoiseSpec.noiseless(), **kw)


@pytest.fixture(scope="session")
def scenarios():
    """Short noiseless datasets for each trajectory kind."""
    out = {}
    for kind in ("static", "circle", "lissajous"):
        out[kind] = generate(TrajectorySpec(kind=kind, duration=6.0), noiseless_rig(), seed=1)
    return out


@pytest.fixture(scope="session")
def lissajous_clean(scenarios):
    return scenarios["lissajous"]


@pytest.fixture(scope="session")
def lissajous_noisy():
    return generate(TrajectorySpec(duration=6.0), SensorRig(), seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
