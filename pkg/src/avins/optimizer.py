"""Nonlinear least squares on a product manifold.

Variables are registered with a :class:`VarKind` that defines the tangent
dimension and retraction. Factors return whitened residuals and Jacobians
per variable. Landmark variables are eliminated with a Schur complement
and the reduced system is solved with a dense Cholesky factorization.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import NonFiniteCost, SingularNormalEquations
from .geometry import RigidTransform, exp_so3, log_so3, normalize_rotation, right_jacobian_inv

logger = logging.getLogger(__name__)

Key = Hashable


# ---------------------------------------------------------------------------
# Variable kinds


@dataclass(frozen=True)
class VarKind:
    name: str
    dim: int
    retract: Callable
    local: Callable  # local(x, x0): tangent coordinates of x around x0
    eliminable: bool = False


def _retract_pose(x: RigidTransform, d):
    return RigidTransform(normalize_rotation(x.rotation @ exp_so3(d[:3])), x.translation + d[3:])


def _local_pose(x: RigidTransform, x0: RigidTransform):
    return np.concatenate([log_so3(x0.rotation.T @ x.rotation), x.translation - x0.translation])


def _retract_rot_left(x, d):
    return normalize_rotation(exp_so3(d) @ x)


def _local_rot_left(x, x0):
    return log_so3(x @ x0.T)


def _retract_gravity(x, d):
    return normalize_rotation(exp_so3(np.array([d[0], d[1], 0.0])) @ x)


def _local_gravity(x, x0):
    return log_so3(x @ x0.T)[:2]


def _retract_vec(x, d):
    return x + d


def _local_vec(x, x0):
    return np.asarray(x, float) - np.asarray(x0, float)


POSE = VarKind("pose", 6, _retract_pose, _local_pose)
VELOCITY = VarKind("velocity", 3, _retract_vec, _local_vec)
BIAS = VarKind("bias", 6, _retract_vec, _local_vec)
LANDMARK = VarKind("landmark", 3, _retract_vec, _local_vec, eliminable=True)
EXTRINSIC_ROTATION = VarKind("extrinsic_rotation", 3, _retract_rot_left, _local_rot_left)
EXTRINSIC_TRANSLATION = VarKind("extrinsic_translation", 3, _retract_vec, _local_vec)
GRAVITY_ROTATION = VarKind("gravity_rotation", 2, _retract_gravity, _local_gravity)


def vector_kind(dim: int, name: str = "vector") -> VarKind:
    return VarKind(f"{name}{dim}", dim, _retract_vec, _local_vec)


def local_jacobian(kind: VarKind, x, x0) -> np.ndarray:
    """d local(x (+) d, x0) / d d at d = 0."""
    if kind.retract is _retract_pose:
        r = log_so3(x0.rotation.T @ x.rotation)
        J = np.eye(6)
        J[:3, :3] = right_jacobian_inv(r)
        return J
    if kind.retract in (_retract_rot_left, _retract_gravity):
        M = x @ x0.T
        J = right_jacobian_inv(log_so3(M)) @ M.T
        return J[:2, :2] if kind.retract is _retract_gravity else J
    return np.eye(kind.dim)


# ---------------------------------------------------------------------------
# Factors


class Factor:
    """Base class. Subclasses implement :meth:`linearize`."""

    keys: tuple = ()
    label: str = "factor"

    def linearize(self, values: dict, jacobians: bool = True):
        """Return whitened residual and a list of Jacobian blocks (or None)."""
        raise NotImplementedError

    def relinearize(self, values: dict) -> bool:
        """Refresh internal linearization points; True if anything changed."""
        return False

    def cost(self, values: dict) -> float:
        r, _ = self.linearize(values, jacobians=False)
        return float(r @ r)

    @property
    def approx_hits(self) -> int:
        return 0


class PriorFactor(Factor):
    """Gaussian prior on one or more variables in local coordinates."""

    label = "prior"

    def __init__(self, keys: Sequence[Key], kinds: Sequence[VarKind], means: Sequence, sqrt_info: np.ndarray,
                 offset: Optional[np.ndarray] = None):
        self.keys = tuple(keys)
        self.kinds = tuple(kinds)
        self.means = list(means)
        self.sqrt_info = np.asarray(sqrt_info, float)
        dim = sum(k.dim for k in self.kinds)
        self.offset = np.zeros(dim) if offset is None else np.asarray(offset, float)

    @classmethod
    def from_covariance(cls, keys, kinds, means, covariance):
        from .factors import sqrt_information

        return cls(keys, kinds, means, sqrt_information(covariance))

    def linearize(self, values, jacobians=True):
        parts = [k.local(values[key], m) for key, k, m in zip(self.keys, self.kinds, self.means)]
        r = self.sqrt_info @ (np.concatenate(parts) + self.offset)
        if not jacobians:
            return r, None
        Js = []
        col = 0
        for key, k, m in zip(self.keys, self.kinds, self.means):
            Jl = local_jacobian(k, values[key], m)
            Js.append(self.sqrt_info[:, col:col + k.dim] @ Jl)
            col += k.dim
        return r, Js


# ---------------------------------------------------------------------------
# Problem and solver


class Algorithm(str, Enum):
    GAUSS_NEWTON = "gauss_newton"
    LEVENBERG_MARQUARDT = "levenberg_marquardt"


@dataclass
class SolverSettings:
    algorithm: Algorithm = Algorithm.LEVENBERG_MARQUARDT
    max_iterations: int = 50
    cost_tolerance: float = 1e-9
    step_tolerance: float = 1e-10
    lm_lambda_init: float = 1e-4
    lm_lambda_scale: float = 10.0
    check_gauge: bool = True

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if self.cost_tolerance <= 0 or self.step_tolerance <= 0:
            raise ValueError("solver tolerances must be positive")


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    reason: str = ""
    cost_breakdown: Dict[str, float] = field(default_factory=dict)
    approx_hits: int = 0
    dropped_observations: int = 0
    wall_time: float = 0.0


class FactorGraphProblem:
    """Variables, factors and a fixed-variable mask."""

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.values: Dict[Key, object] = {}
        self.kinds: Dict[Key, VarKind] = {}
        self.fixed: set = set()
        self.factors: List[Factor] = []
        self.settings = settings or SolverSettings()

    # registry -------------------------------------------------------------
    def add_variable(self, key: Key, kind: VarKind, value, fixed: bool = False) -> Key:
        if key in self.values:
            raise KeyError(f"variable {key!r} already registered")
        self.values[key] = value
        self.kinds[key] = kind
        if fixed:
            self.fixed.add(key)
        return key

    def remove_variable(self, key: Key) -> None:
        self.values.pop(key)
        self.kinds.pop(key)
        self.fixed.discard(key)

    def set_fixed(self, key: Key, fixed: bool = True) -> None:
        if fixed:
            self.fixed.add(key)
        else:
            self.fixed.discard(key)

    def add_factor(self, factor: Factor) -> Factor:
        for k in factor.keys:
            if k is not None and k not in self.values:
                raise KeyError(f"factor {factor.label} references unknown variable {k!r}")
        self.factors.append(factor)
        return factor

    def remove_factors(self, predicate: Callable[[Factor], bool]) -> List[Factor]:
        removed = [f for f in self.factors if predicate(f)]
        self.factors = [f for f in self.factors if not predicate(f)]
        return removed

    def free_keys(self) -> List[Key]:
        return [k for k in self.values if k not in self.fixed]

    # evaluation -------------------------------------------------------------
    def cost(self, values: Optional[dict] = None) -> float:
        values = self.values if values is None else values
        return float(sum(f.cost(values) for f in self.factors))

    def cost_breakdown(self, values: Optional[dict] = None) -> Dict[str, float]:
        values = self.values if values is None else values
        out: Dict[str, float] = {}
        for f in self.factors:
            out[f.label] = out.get(f.label, 0.0) + f.cost(values)
        return out


@dataclass
class _Layout:
    keys: List[Key]
    offsets: Dict[Key, int]
    n: int
    lm_keys: List[Key]
    lm_index: Dict[Key, int]


def _layout(problem: FactorGraphProblem) -> _Layout:
    keys, offsets, n = [], {}, 0
    lm_keys, lm_index = [], {}
    for k in problem.values:
        if k in problem.fixed:
            continue
        kind = problem.kinds[k]
        if kind.eliminable:
            lm_index[k] = len(lm_keys)
            lm_keys.append(k)
        else:
            offsets[k] = n
            keys.append(k)
            n += kind.dim
    return _Layout(keys, offsets, n, lm_keys, lm_index)


@dataclass
class NormalEquations:
    Hcc: np.ndarray
    gc: np.ndarray
    Hcl: np.ndarray  # (n, 3L)
    Hll: np.ndarray  # (L, 3, 3)
    gl: np.ndarray  # (L, 3)
    cost: float


def build_normal_equations(problem: FactorGraphProblem, layout: _Layout) -> NormalEquations:
    n, L = layout.n, len(layout.lm_keys)
    Hcc = np.zeros((n, n))
    gc = np.zeros(n)
    Hcl = np.zeros((n, 3 * L))
    Hll = np.zeros((L, 3, 3))
    gl = np.zeros((L, 3))
    cost = 0.0
    values = problem.values
    for f in problem.factors:
        if getattr(f, "batched", False):
            cost += f.accumulate(values, layout, Hcc, gc, Hcl, Hll, gl)
            continue
        r, Js = f.linearize(values)
        cost += float(r @ r)
        blocks = []
        for key, J in zip(f.keys, Js):
            if key is None or J is None or key in problem.fixed:
                continue
            if key in layout.lm_index:
                blocks.append((True, layout.lm_index[key], J))
            else:
                blocks.append((False, layout.offsets[key], J))
        for a, (la, ia, Ja) in enumerate(blocks):
            ga = Ja.T @ r
            if la:
                gl[ia] += ga
            else:
                gc[ia:ia + Ja.shape[1]] += ga
            for lb, ib, Jb in blocks[a:]:
                Hab = Ja.T @ Jb
                if not la and not lb:
                    Hcc[ia:ia + Ja.shape[1], ib:ib + Jb.shape[1]] += Hab
                    if ib != ia:
                        Hcc[ib:ib + Jb.shape[1], ia:ia + Ja.shape[1]] += Hab.T
                elif la and lb:
                    if ia != ib:
                        raise ValueError("factors coupling two landmarks are not supported")
                    Hll[ia] += Hab
                elif not la and lb:
                    Hcl[ia:ia + Ja.shape[1], 3 * ib:3 * ib + 3] += Hab
                else:
                    Hcl[ib:ib + Jb.shape[1], 3 * ia:3 * ia + 3] += Hab.T
    return NormalEquations(Hcc, gc, Hcl, Hll, gl, cost)


def _reduce(ne: NormalEquations, lam: float):
    """Damp, eliminate landmarks and return (S, b, Hll_inv)."""
    Hcc = ne.Hcc.copy()
    Hll = ne.Hll.copy()
    if lam > 0.0:
        d = np.clip(np.diag(Hcc), 1e-6, 1e32)
        Hcc[np.diag_indices_from(Hcc)] += lam * d
        dl = np.clip(np.diagonal(Hll, axis1=1, axis2=2), 1e-6, 1e32)
        idx = np.arange(3)
        Hll[:, idx, idx] += lam * dl
    L = len(Hll)
    if L == 0:
        return Hcc, ne.gc.copy(), Hll
    try:
        Hll_inv = np.linalg.inv(Hll)
    except np.linalg.LinAlgError as exc:
        raise SingularNormalEquations("landmark block is singular") from exc
    if not np.all(np.isfinite(Hll_inv)):
        raise SingularNormalEquations("landmark block is singular")
    n = Hcc.shape[0]
    HclB = ne.Hcl.reshape(n, L, 3)
    Y = np.einsum("nlj,ljk->nlk", HclB, Hll_inv).reshape(n, 3 * L)
    S = Hcc - Y @ ne.Hcl.T
    b = ne.gc - Y @ ne.gl.reshape(-1)
    return 0.5 * (S + S.T), b, Hll_inv


def _solve_reduced(ne: NormalEquations, lam: float):
    S, b, Hll_inv = _reduce(ne, lam)
    n = S.shape[0]
    if n:
        try:
            cf = scipy.linalg.cho_factor(S, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularNormalEquations("reduced system is not positive definite") from exc
        dc = -scipy.linalg.cho_solve(cf, b)
    else:
        dc = np.zeros(0)
    L = len(ne.Hll)
    if L:
        rhs = ne.gl + (ne.Hcl.T @ dc).reshape(L, 3)
        dl = -np.einsum("lij,lj->li", Hll_inv, rhs)
    else:
        dl = np.zeros((0, 3))
    return dc, dl


def _model_decrease(ne: NormalEquations, dc: np.ndarray, dl: np.ndarray) -> float:
    """Decrease of the Gauss-Newton model of sum(r^2) for the step (dc, dl)."""
    dlf = dl.reshape(-1)
    quad = dc @ ne.Hcc @ dc + 2.0 * dc @ (ne.Hcl @ dlf) + np.einsum("li,lij,lj->", dl, ne.Hll, dl)
    return float(-2.0 * (ne.gc @ dc + ne.gl.reshape(-1) @ dlf) - quad)


def _check_gauge(ne: NormalEquations, tol: float = 1e-10) -> None:
    S, _, _ = _reduce(ne, 0.0)
    if S.shape[0] == 0:
        return
    if not np.all(np.isfinite(S)):
        raise SingularNormalEquations("reduced system is not finite")
    d = np.sqrt(np.clip(np.diag(S), 1e-300, None))
    with np.errstate(over="ignore", invalid="ignore"):
        Sn = S / np.outer(d, d)
    try:
        ev = np.linalg.eigvalsh(Sn)
    except np.linalg.LinAlgError as exc:
        raise SingularNormalEquations("eigenvalues of the reduced system did not converge") from exc
    if not np.all(np.isfinite(ev)) or ev[0] < tol * max(ev[-1], 1.0):
        raise SingularNormalEquations(
            f"normal equations are singular (min scaled eigenvalue {ev[0]:.3e}); is the gauge fixed?"
        )


def _retract_all(problem: FactorGraphProblem, layout: _Layout, dc: np.ndarray, dl: np.ndarray) -> dict:
    new = dict(problem.values)
    for k in layout.keys:
        kind = problem.kinds[k]
        o = layout.offsets[k]
        new[k] = kind.retract(problem.values[k], dc[o:o + kind.dim])
    for k, i in layout.lm_index.items():
        new[k] = problem.kinds[k].retract(problem.values[k], dl[i])
    return new


def _relinearize(problem: FactorGraphProblem) -> bool:
    changed = False
    for f in problem.factors:
        changed |= bool(f.relinearize(problem.values))
    return changed


def solve(problem: FactorGraphProblem, settings: Optional[SolverSettings] = None):
    """Minimize the problem's cost in place; returns (values, SolveReport)."""
    s = settings or problem.settings
    t_start = time.perf_counter()
    layout = _layout(problem)
    report = SolveReport()
    hits0 = sum(f.approx_hits for f in problem.factors)
    if layout.n == 0 and not layout.lm_keys:
        raise SingularNormalEquations("problem has no free variables")
    _relinearize(problem)
    cost = problem.cost()
    if not np.isfinite(cost):
        raise NonFiniteCost("initial cost is not finite")
    report.initial_cost = cost
    lam = s.lm_lambda_init
    nu = 2.0
    use_lm = s.algorithm == Algorithm.LEVENBERG_MARQUARDT
    for it in range(s.max_iterations):
        if cost <= 1e-28:
            report.converged, report.reason = True, "zero cost"
            break
        ne = build_normal_equations(problem, layout)
        if not np.isfinite(ne.cost) or not np.all(np.isfinite(ne.Hcc)) or not np.all(np.isfinite(ne.gc)):
            raise NonFiniteCost("non-finite residuals or Jacobians")
        if it == 0 and s.check_gauge:
            _check_gauge(ne)
        report.iterations = it + 1
        accepted = False
        step_norm = 0.0
        new_cost = cost
        for _ in range(30):
            damping = lam if use_lm else 0.0
            try:
                dc, dl = _solve_reduced(ne, damping)
            except SingularNormalEquations:
                if not use_lm:
                    raise
                lam *= s.lm_lambda_scale
                continue
            step_norm = float(np.sqrt(dc @ dc + np.sum(dl * dl)))
            trial = _retract_all(problem, layout, dc, dl)
            new_cost = float(sum(f.cost(trial) for f in problem.factors))
            if np.isfinite(new_cost) and new_cost <= cost:
                problem.values = trial
                accepted = True
                if use_lm:
                    # Predicted decrease of the quadratic model for the gain ratio.
                    pred = _model_decrease(ne, dc, dl)
                    rho = (cost - new_cost) / pred if pred > 0 else 0.0
                    lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                    lam = max(lam, 1e-12)
                    nu = 2.0
                break
            if not use_lm:
                # Gauss-Newton step increased the cost: fall back to damping.
                use_lm = True
                continue
            lam *= nu * s.lm_lambda_scale / 2.0
            nu *= 2.0
            if step_norm < s.step_tolerance:
                break
        if not accepted:
            report.converged = True
            report.reason = "no further decrease"
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        if _relinearize(problem):
            cost = problem.cost()
        if rel < s.cost_tolerance:
            report.converged, report.reason = True, "relative cost change below tolerance"
            break
        if step_norm < s.step_tolerance:
            report.converged, report.reason = True, "step below tolerance"
            break
    else:
        report.reason = "max iterations"
    report.final_cost = cost
    report.cost_breakdown = problem.cost_breakdown()
    report.approx_hits = sum(f.approx_hits for f in problem.factors) - hits0
    report.dropped_observations = sum(getattr(f, "dropped", 0) for f in problem.factors)
    report.wall_time = time.perf_counter() - t_start
    logger.debug("solve: %d iterations, cost %.3e -> %.3e (%s)", report.iterations,
                 report.initial_cost, report.final_cost, report.reason)
    return problem.values, report


def marginal_covariance(problem: FactorGraphProblem, keys: Sequence[Key]) -> np.ndarray:
    """Joint covariance of non-landmark variables from the current Hessian."""
    layout = _layout(problem)
    ne = build_normal_equations(problem, layout)
    S, _, _ = _reduce(ne, 0.0)
    cov = scipy.linalg.inv(S)
    idx = np.concatenate(
        [np.arange(layout.offsets[k], layout.offsets[k] + problem.kinds[k].dim) for k in keys]
    )
    out = cov[np.ix_(idx, idx)]
    return 0.5 * (out + out.T)


def schur_marginal_prior(problem: FactorGraphProblem, drop_keys: Sequence[Key]) -> Optional[PriorFactor]:
    """Linear prior on the neighbours of ``drop_keys`` from exact marginalization.

    Only factors touching the dropped variables are marginalized; the
    returned prior lives in the local coordinates of the current values.
    Landmarks must not be connected to the dropped variables.
    """
    drop = set(drop_keys)
    touching = [f for f in problem.factors if drop & set(f.keys)]
    keep = []
    for f in touching:
        for k in f.keys:
            if k is not None and k not in drop and k not in problem.fixed and k not in keep:
                if problem.kinds[k].eliminable:
                    raise ValueError("cannot marginalize variables that share landmarks")
                keep.append(k)
    if not keep:
        return None
    sub = FactorGraphProblem()
    for k in list(drop_keys) + keep:
        sub.add_variable(k, problem.kinds[k], problem.values[k], fixed=k in problem.fixed)
    for k in problem.fixed:
        if any(k in f.keys for f in touching) and k not in sub.values:
            sub.add_variable(k, problem.kinds[k], problem.values[k], fixed=True)
    for f in touching:
        sub.factors.append(f)
    layout = _layout(sub)
    ne = build_normal_equations(sub, layout)
    idx_m = np.concatenate([np.arange(layout.offsets[k], layout.offsets[k] + sub.kinds[k].dim)
                            for k in drop_keys if k in layout.offsets])
    idx_k = np.concatenate([np.arange(layout.offsets[k], layout.offsets[k] + sub.kinds[k].dim) for k in keep])
    H = ne.Hcc
    Hmm = H[np.ix_(idx_m, idx_m)]
    Hkm = H[np.ix_(idx_k, idx_m)]
    Hmm_inv = np.linalg.inv(Hmm)
    Hp = H[np.ix_(idx_k, idx_k)] - Hkm @ Hmm_inv @ Hkm.T
    gp = ne.gc[idx_k] - Hkm @ Hmm_inv @ ne.gc[idx_m]
    # 0.5 |L x + c|^2 reproduces x^T Hp x + 2 gp^T x up to a constant.
    Hp = 0.5 * (Hp + Hp.T)
    w, V = np.linalg.eigh(Hp)
    w = np.clip(w, 1e-12 * max(w.max(), 1e-300), None)
    Lm = (V * np.sqrt(w)).T
    c = np.linalg.solve(Lm.T, gp)
    # The prior residual is Lm (local + offset) with offset = Lm^-1 c.
    offset = np.linalg.solve(Lm, c)
    return PriorFactor(keep, [problem.kinds[k] for k in keep], [problem.values[k] for k in keep], Lm, offset)


def marginalize_or_drop(problem: FactorGraphProblem, drop_keys: Sequence[Key], prior_keys: Sequence[Key],
                        strategy: str = "prior", covariance: Optional[np.ndarray] = None) -> FactorGraphProblem:
    """Remove ``drop_keys`` and their factors, installing a boundary prior.

    ``strategy="prior"`` anchors ``prior_keys`` at their current values with
    ``covariance`` (or the current marginal covariance when omitted).
    ``strategy="schur"`` installs the exact linearized marginal instead.
    """
    drop = set(drop_keys)
    if strategy == "schur":
        prior = schur_marginal_prior(problem, drop_keys)
    elif strategy == "prior":
        cov = marginal_covariance(problem, prior_keys) if covariance is None else covariance
        prior = PriorFactor.from_covariance(
            prior_keys, [problem.kinds[k] for k in prior_keys], [problem.values[k] for k in prior_keys], cov
        )
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    problem.remove_factors(lambda f: bool(drop & set(f.keys)))
    for k in drop_keys:
        problem.remove_variable(k)
    if prior is not None:
        problem.add_factor(prior)
    return problem
