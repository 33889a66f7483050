"""Visual-inertial-acoustic navigation: DVL/IMU/stereo factor-graph estimation and sensor calibration."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AvinsError,
    ConfigError,
    DataError,
    ObservabilityError,
    SolverError,
)
from .geometry import RigidTransform, exp_so3, log_so3, right_jacobian  # noqa: F401
