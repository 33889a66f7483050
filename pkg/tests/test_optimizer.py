import numpy as np
import pytest

from avins.errors import NonFiniteCost, SingularNormalEquations
from avins.factors import CameraModel, ReprojectionFactor, project_batch
from avins.geometry import RigidTransform, exp_so3
from avins.optimizer import (
    LANDMARK,
    POSE,
    Algorithm,
    Factor,
    FactorGraphProblem,
    PriorFactor,
    SolverSettings,
    marginal_covariance,
    marginalize_or_drop,
    solve,
    vector_kind,
)

V2 = vector_kind(2)


class LinearFactor(Factor):
    """r = sum_k A_k x_k - b for vector variables."""

    label = "linear"

    def __init__(self, keys, As, b):
        self.keys = tuple(keys)
        self.As = [np.atleast_2d(A) for A in As]
        self.b = np.asarray(b, float)

    def linearize(self, values, jacobians=True):
        r = sum(A @ values[k] for k, A in zip(self.keys, self.As)) - self.b
        return r, (list(self.As) if jacobians else None)


class ExpFit(Factor):
    """Residuals y_i - a exp(c t_i) of a two-parameter curve fit."""

    label = "expfit"

    def __init__(self, key, t, y):
        self.keys = (key,)
        self.t, self.y = t, y

    def linearize(self, values, jacobians=True):
        a, c = values[self.keys[0]]
        e = np.exp(c * self.t)
        r = self.y - a * e
        return r, ([np.column_stack([-e, -a * self.t * e])] if jacobians else None)


def test_prior_pulls_free_pose_to_mean():
    mean = RigidTransform(exp_so3([0.3, -0.2, 1.0]), [1.0, -2.0, 0.5])
    pb = FactorGraphProblem()
    pb.add_variable("T", POSE, RigidTransform())
    pb.add_factor(PriorFactor.from_covariance(["T"], [POSE], [mean], np.diag([1e-2] * 3 + [1e-1] * 3)))
    values, report = solve(pb)
    assert values["T"].allclose(mean, atol=1e-10)
    assert report.converged


def test_zero_residual_converges_immediately():
    pb = FactorGraphProblem()
    pb.add_variable("x", V2, np.array([1.0, 2.0]))
    pb.add_factor(LinearFactor(["x"], [np.eye(2)], [1.0, 2.0]))
    _, report = solve(pb)
    assert report.iterations <= 1 and report.final_cost == 0.0


@pytest.mark.parametrize("algorithm", list(Algorithm))
def test_nonlinear_curve_fit(algorithm):
    t = np.linspace(0, 2, 30)
    y = 1.5 * np.exp(-0.7 * t)
    pb = FactorGraphProblem(SolverSettings(algorithm=algorithm, max_iterations=100))
    pb.add_variable("p", V2, np.array([1.0, 0.0]))
    pb.add_factor(ExpFit("p", t, y))
    values, report = solve(pb)
    assert np.allclose(values["p"], [1.5, -0.7], atol=1e-8)
    assert report.final_cost < 1e-16


def _small_ba(lm_kind, seed=0):
    rng = np.random.default_rng(seed)
    cam = CameraModel()
    poses = [RigidTransform(exp_so3(rng.normal(size=3) * 0.05), [0.3 * k, 0.0, 0.0]) for k in range(3)]
    lms = np.column_stack([rng.uniform(-2, 2, 10), rng.uniform(-1.5, 1.5, 10), rng.uniform(4, 8, 10)])
    pb = FactorGraphProblem()
    for k, T in enumerate(poses):
        pb.add_variable(("T", k), POSE, RigidTransform(T.rotation, T.translation + (0.02 if k else 0.0)),
                        fixed=(k == 0))
    for i, l in enumerate(lms):
        pb.add_variable(("l", i), lm_kind, l + rng.normal(size=3) * 0.05)
        for k, T in enumerate(poses):
            pred, *_ = project_batch(T.rotation[None], T.translation[None], l[None], cam)
            pb.add_factor(ReprojectionFactor(("T", k), ("l", i), pred[0] + rng.normal(size=3) * 0.5, cam))
    return pb


def test_schur_elimination_matches_dense_solve():
    a, _ = solve(_small_ba(LANDMARK))
    b, _ = solve(_small_ba(vector_kind(3, "point")))
    for k in range(3):
        assert a[("T", k)].allclose(b[("T", k)], atol=1e-8)
    for i in range(10):
        assert np.allclose(a[("l", i)], b[("l", i)], atol=1e-8)


def test_unfixed_gauge_is_reported():
    pb = _small_ba(LANDMARK)
    pb.set_fixed(("T", 0), False)
    with pytest.raises(SingularNormalEquations):
        solve(pb, SolverSettings(check_gauge=True))


def test_non_finite_cost_raises():
    pb = FactorGraphProblem()
    pb.add_variable("x", V2, np.zeros(2))
    pb.add_factor(LinearFactor(["x"], [np.eye(2)], [np.nan, 0.0]))
    with pytest.raises(NonFiniteCost):
        solve(pb)


def test_no_free_variables_raises():
    pb = FactorGraphProblem()
    pb.add_variable("x", V2, np.zeros(2), fixed=True)
    with pytest.raises(SingularNormalEquations):
        solve(pb)


def _chain(rng):
    """Linear Gaussian chain x0 - x1 - x2 with an anchor on x0."""
    pb = FactorGraphProblem()
    for k in range(3):
        pb.add_variable(k, V2, rng.normal(size=2))
    pb.add_factor(LinearFactor([0], [np.eye(2) * 2.0], rng.normal(size=2)))
    for k in range(2):
        pb.add_factor(LinearFactor([k, k + 1], [-np.eye(2), np.eye(2) + 0.1 * rng.normal(size=(2, 2))],
                                   rng.normal(size=2)))
    pb.add_factor(LinearFactor([2], [np.array([[1.0, 0.5]])], [0.3]))
    return pb


def test_schur_marginalization_is_exact_for_linear_problems(rng):
    full = _chain(np.random.default_rng(5))
    ref, _ = solve(full)
    cov_ref = marginal_covariance(full, [1, 2])
    pb = _chain(np.random.default_rng(5))
    marginalize_or_drop(pb, [0], [1], strategy="schur")
    assert 0 not in pb.values
    got, _ = solve(pb)
    assert np.allclose(got[1], ref[1], atol=1e-9) and np.allclose(got[2], ref[2], atol=1e-9)
    assert np.allclose(marginal_covariance(pb, [1, 2]), cov_ref, atol=1e-9)


def test_marginal_covariance_matches_information_inverse():
    pb = _chain(np.random.default_rng(6))
    solve(pb)
    J = np.zeros((0, 6))
    for f in pb.factors:
        _, blocks = f.linearize(pb.values)
        row = np.zeros((len(blocks[0]), 6))
        for k, B in zip(f.keys, blocks):
            row[:, 2 * k:2 * k + 2] = B
        J = np.vstack([J, row])
    cov = np.linalg.inv(J.T @ J)
    assert np.allclose(marginal_covariance(pb, [2, 0]), cov[np.ix_([4, 5, 0, 1], [4, 5, 0, 1])], atol=1e-10)


def test_drop_with_prior_keeps_marginal():
    pb = _chain(np.random.default_rng(7))
    solve(pb)
    cov = marginal_covariance(pb, [1])
    marginalize_or_drop(pb, [0], [1], strategy="prior")
    prior = pb.factors[-1]
    assert isinstance(prior, PriorFactor)
    assert np.allclose(np.linalg.inv(prior.sqrt_info.T @ prior.sqrt_info), cov, atol=1e-10)
    with pytest.raises(ValueError):
        marginalize_or_drop(pb, [1], [2], strategy="bogus")
