import numpy as np
import pytest

from avins.geometry import (
    RigidTransform,
    cross3,
    exp_so3,
    exp_so3_batch,
    hat,
    hat_batch,
    is_rotation,
    log_so3,
    normalize_rotation,
    right_jacobian,
    right_jacobian_batch,
    right_jacobian_inv,
    rotation_distance,
    vee,
)


def test_hat_examples():
    assert np.array_equal(hat([0, 0, 0]), np.zeros((3, 3)))
    assert np.array_equal(hat([0, 0, 1]), np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]]))


def test_hat_is_cross_product(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(hat(a) @ b, np.cross(a, b))
    assert np.allclose(cross3(a, b), np.cross(a, b))
    assert np.allclose(vee(hat(a)), a)


def test_exp_examples():
    assert np.allclose(exp_so3([0, 0, 0]), np.eye(3))
    assert np.allclose(exp_so3([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0])


@pytest.mark.parametrize("phi", [[0.1, -0.2, 0.3], [1e-9, 0, 0], [0, 2.0, -1.0], [3.0, 0.5, 0.2]])
def test_log_exp_round_trip(phi):
    phi = np.asarray(phi)
    assert np.allclose(log_so3(exp_so3(phi)), phi, atol=1e-12)
    assert is_rotation(exp_so3(phi))


def test_log_identity_and_near_pi():
    assert np.allclose(log_so3(np.eye(3)), 0)
    phi = np.array([0.0, 0.0, np.pi - 1e-7])
    assert np.allclose(log_so3(exp_so3(phi)), phi, atol=1e-6)
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    assert np.isclose(np.linalg.norm(log_so3(exp_so3(np.pi * axis))), np.pi)


def test_right_jacobian_limits(rng):
    assert np.allclose(right_jacobian(np.zeros(3)), np.eye(3))
    phi = rng.normal(size=3)
    assert np.allclose(right_jacobian(phi) @ right_jacobian_inv(phi), np.eye(3))
    tiny = np.array([1e-7, -2e-7, 3e-7])
    assert np.allclose(right_jacobian(tiny), np.eye(3) - 0.5 * hat(tiny), atol=1e-13)


def test_right_jacobian_first_order(rng):
    phi, d = rng.normal(size=3), rng.normal(size=3) * 1e-6
    lhs = exp_so3(phi + d)
    rhs = exp_so3(phi) @ exp_so3(right_jacobian(phi) @ d)
    assert np.abs(lhs - rhs).max() < 1e-11


def test_batch_versions_match(rng):
    phis = rng.normal(size=(6, 3))
    phis[0] = 0.0
    assert np.allclose(exp_so3_batch(phis), [exp_so3(p) for p in phis])
    assert np.allclose(right_jacobian_batch(phis), [right_jacobian(p) for p in phis])
    assert np.allclose(hat_batch(phis), [hat(p) for p in phis])


def test_normalize_rotation(rng):
    R = exp_so3(rng.normal(size=3)) + 1e-6 * rng.normal(size=(3, 3))
    Rn = normalize_rotation(R)
    assert is_rotation(Rn)
    assert np.abs(Rn - R).max() < 1e-5


def test_rigid_transform_algebra(rng):
    A = RigidTransform(exp_so3(rng.normal(size=3)), rng.normal(size=3))
    B = RigidTransform(exp_so3(rng.normal(size=3)), rng.normal(size=3))
    x = rng.normal(size=3)
    assert np.allclose((A @ B).apply(x), A.apply(B.apply(x)))
    assert (A @ A.inverse()).allclose(RigidTransform.identity())
    assert np.allclose((A @ B).matrix(), A.matrix() @ B.matrix())
    assert np.isclose(rotation_distance(A.rotation, A.rotation), 0.0)
