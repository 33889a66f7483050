"""SO(3) and SE(3) primitives.

Rotations are plain 3x3 numpy arrays. Tangent vectors are axis-angle
3-vectors in radians. All functions are pure and allocate new arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EXP_TAYLOR_EPS = 1e-8
_JR_TAYLOR_EPS = 1e-5


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product of two 3-vectors without the overhead of ``np.cross``."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` (uses the antisymmetric part of ``m``)."""
    m = np.asarray(m, dtype=float)
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a second-order Taylor fallback near zero."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _EXP_TAYLOR_EPS:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * K @ K


def log_so3(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix.

    At exactly pi the axis sign is ambiguous; the returned axis has its
    largest-magnitude component nonnegative.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    w = vee(R)  # = sin(theta) * axis
    sin_theta = float(np.linalg.norm(w))
    theta = float(np.arctan2(sin_theta, cos_theta))
    if theta < 1e-7:
        # theta / sin(theta) ~ 1 + theta^2 / 6
        return w * (1.0 + theta * theta / 6.0)
    if np.pi - theta > 1e-4:
        return w * (theta / sin_theta)
    # Near pi: recover the axis from the symmetric part, R + I ~ 2 a a^T.
    B = 0.5 * (R + R.T) - cos_theta * np.eye(3)
    col = int(np.argmax(np.diag(B)))
    axis = B[:, col] / np.sqrt(max(B[col, col], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.pi - theta > 1e-12 and float(axis @ w) < 0.0:
        axis = -axis
    elif np.pi - theta <= 1e-12:
        k = int(np.argmax(np.abs(axis)))
        if axis[k] < 0.0:
            axis = -axis
    return axis * theta


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): exp(phi + d) ~ exp(phi) exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta2 = float(phi @ phi)
    K = hat(phi)
    if theta2 < _JR_TAYLOR_EPS**2:
        return np.eye(3) - 0.5 * K + (1.0 / 6.0) * K @ K
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * K + b * K @ K


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of :func:`right_jacobian` in closed form."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta2 = float(phi @ phi)
    K = hat(phi)
    if theta2 < _JR_TAYLOR_EPS**2:
        return np.eye(3) + 0.5 * K + (1.0 / 12.0) * K @ K
    theta = np.sqrt(theta2)
    c = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of ``R`` in radians."""
    return float(np.linalg.norm(log_so3(R)))


def rotation_distance(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic distance between two rotations in radians."""
    return rotation_angle(np.asarray(Ra).T @ np.asarray(Rb))


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol
    )


def hat_batch(v: np.ndarray) -> np.ndarray:
    """Vectorized :func:`hat` for an (N, 3) array, returns (N, 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    """Vectorized :func:`right_jacobian` for an (N, 3) array."""
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    theta = np.sqrt(np.einsum("ni,ni->n", phi, phi))
    small = theta < _JR_TAYLOR_EPS
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    b = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / safe**3)
    K = hat_batch(phi)
    return np.eye(3) - a[:, None, None] * K + b[:, None, None] * (K @ K)


def exp_so3_batch(phi: np.ndarray) -> np.ndarray:
    """Vectorized :func:`exp_so3` for an (N, 3) array."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.einsum("...i,...i->...", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < _EXP_TAYLOR_EPS
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat_batch(phi)
    KK = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * KK


@dataclass(frozen=True)
class RigidTransform:
    """Rigid transform T_AB mapping points from frame B into frame A."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_tangent(cls, xi: np.ndarray) -> "RigidTransform":
        """Build from a (rotation, translation) 6-vector without coupling."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(exp_so3(xi[:3]), xi[3:])

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def normalized(self) -> "RigidTransform":
        return RigidTransform(normalize_rotation(self.rotation), self.translation)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )
