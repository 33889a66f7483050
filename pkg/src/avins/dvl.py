"""Four-beam DVL geometry and body-velocity recovery.

Each transducer n measures the projection of the DVL-frame velocity on its
beam direction ``e_n = [sx cos(b) cos(a), sy sin(b) cos(a), sin(a)]`` where
``a`` is the tilt from the horizontal plane, ``b`` the yaw about the DVL z
axis, and (sx, sy) a fixed per-beam sign pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RankDeficientGeometry

# Sign pattern (sx, sy) of beams 1..4.
BEAM_SIGNS = np.array([[-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [1.0, 1.0]])

DEFAULT_ALPHA = np.deg2rad(67.5)
DEFAULT_BETA = np.deg2rad(45.0)
MAX_CONDITION = 1e8


@dataclass(frozen=True)
class TransducerGeometry:
    """Per-beam tilt ``alpha`` and yaw ``beta`` in radians."""

    alpha: np.ndarray = field(default_factory=lambda: np.full(4, DEFAULT_ALPHA))
    beta: np.ndarray = field(default_factory=lambda: np.full(4, DEFAULT_BETA))

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.broadcast_to(np.asarray(self.alpha, float), (4,)).copy())
        object.__setattr__(self, "beta", np.broadcast_to(np.asarray(self.beta, float), (4,)).copy())

    @classmethod
    def nominal(cls, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> "TransducerGeometry":
        return cls(np.full(4, alpha), np.full(4, beta))

    def as_vector(self) -> np.ndarray:
        """Angles stacked per beam as [a1, b1, a2, b2, ...]."""
        return np.column_stack([self.alpha, self.beta]).reshape(8)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "TransducerGeometry":
        x = np.asarray(x, float).reshape(4, 2)
        return cls(x[:, 0], x[:, 1])

    def to_dict(self) -> dict:
        return {"alpha_deg": np.rad2deg(self.alpha).tolist(), "beta_deg": np.rad2deg(self.beta).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TransducerGeometry":
        return cls(np.deg2rad(d["alpha_deg"]), np.deg2rad(d["beta_deg"]))


@dataclass(frozen=True)
class TransducerMeasurement:
    """Radial velocities of the four beams at one timestamp."""

    v: np.ndarray
    timestamp: float = 0.0
    sigma_d: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, float).reshape(4))


@dataclass(frozen=True)
class BodyVelocity:
    """DVL-frame velocity with its covariance."""

    v: np.ndarray
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    timestamp: float = 0.0


def beam_direction(alpha: float, beta: float, sx: float, sy: float) -> np.ndarray:
    ca = np.cos(alpha)
    return np.array([sx * np.cos(beta) * ca, sy * np.sin(beta) * ca, np.sin(alpha)])


def projection_vectors(geom: TransducerGeometry) -> np.ndarray:
    """Stack the four beam directions into the 4x3 projection matrix E."""
    ca, sa = np.cos(geom.alpha), np.sin(geom.alpha)
    cb, sb = np.cos(geom.beta), np.sin(geom.beta)
    return np.column_stack([BEAM_SIGNS[:, 0] * cb * ca, BEAM_SIGNS[:, 1] * sb * ca, sa])


def projection_derivatives(geom: TransducerGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of each beam row w.r.t. its own alpha and beta, each 4x3."""
    ca, sa = np.cos(geom.alpha), np.sin(geom.alpha)
    cb, sb = np.cos(geom.beta), np.sin(geom.beta)
    sx, sy = BEAM_SIGNS[:, 0], BEAM_SIGNS[:, 1]
    d_alpha = np.column_stack([-sx * cb * sa, -sy * sb * sa, ca])
    d_beta = np.column_stack([-sx * sb * ca, sy * cb * ca, np.zeros(4)])
    return d_alpha, d_beta


def _normal_matrix(E: np.ndarray) -> np.ndarray:
    EtE = E.T @ E
    if not np.all(np.isfinite(EtE)) or np.linalg.cond(EtE) > MAX_CONDITION:
        raise RankDeficientGeometry("projection matrix is rank deficient (cond(E^T E) > 1e8)")
    return EtE


def solve_body_velocity(m: TransducerMeasurement, E: np.ndarray) -> BodyVelocity:
    """Least-squares DVL-frame velocity from four beam readings."""
    E = np.asarray(E, float)
    EtE = _normal_matrix(E)
    v = np.linalg.solve(EtE, E.T @ m.v)
    cov = m.sigma_d**2 * np.linalg.inv(EtE)
    return BodyVelocity(v, 0.5 * (cov + cov.T), m.timestamp)


def solve_body_velocities(readings: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Vectorized solve for an (N, 4) array of readings, returns (N, 3)."""
    EtE = _normal_matrix(np.asarray(E, float))
    return np.linalg.solve(EtE, E.T @ np.asarray(readings, float).T).T


def body_velocity_covariance(E: np.ndarray, sigma_d: float) -> np.ndarray:
    return sigma_d**2 * np.linalg.inv(_normal_matrix(np.asarray(E, float)))


def synthesize_transducer_velocities(
    v_body: np.ndarray,
    geom: TransducerGeometry,
    sigma_d: float = 0.0,
    rng_seed: int | np.random.Generator | None = None,
    timestamp: float = 0.0,
) -> TransducerMeasurement:
    """Forward-project a DVL-frame velocity onto the beams and add noise."""
    v = projection_vectors(geom) @ np.asarray(v_body, float).reshape(3)
    if sigma_d > 0.0:
        rng = np.random.default_rng(rng_seed)
        v = v + sigma_d * rng.standard_normal(4)
    return TransducerMeasurement(v, timestamp, sigma_d)
