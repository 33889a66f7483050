"""Pre-integration of gyro, accelerometer and DVL measurements between keyframes.

The raw streams are first cut into integration steps (:class:`ImuSteps`).
Every step carries one gyro and one accelerometer value and a duration.
Gyro and accelerometer increments follow the usual on-manifold recursion
with first-order covariance and bias-Jacobian propagation. Within a step
the signals are constant, and the rotation accrued inside the step is
integrated exactly through the factors ``Gamma1 = int_0^1 Exp(s phi) ds``
and ``Gamma2 = int_0^1 int_0^s Exp(u phi) du ds``. This keeps the
discretization error second order in the step length. The DVL
translation increment sums the DVL-frame velocity rotated into the IMU
frame of keyframe i::

    dp_bar = sum_k dR_ik Gamma1_k R_ID v_k dt_k
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import EmptySampleSet, MissingVelocity, NonMonotoneTime
from .geometry import exp_so3, exp_so3_batch, hat, hat_batch, log_so3, right_jacobian, right_jacobian_batch

BIAS_REINTEGRATION_THRESHOLD = 1e-3
SIGMA_PHI = 1e-2
SIGMA_V = 1e-2
_TIME_EPS = 1e-9
_SERIES_ANGLE = 1e-2


def step_gammas(phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gamma1 and Gamma2 for a batch of step rotation vectors (N, 3)."""
    phi = np.asarray(phi, float).reshape(-1, 3)
    th = np.linalg.norm(phi, axis=1)
    small = th < _SERIES_ANGLE
    t2 = th * th
    ts = np.where(small, 1.0, th)
    c1 = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(ts)) / ts**2)
    c2 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (ts - np.sin(ts)) / ts**3)
    c3 = np.where(small, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
                  (0.5 * ts**2 + np.cos(ts) - 1.0) / ts**4)
    P = hat_batch(phi)
    P2 = P @ P
    I = np.eye(3)
    g1 = I + c1[:, None, None] * P + c2[:, None, None] * P2
    g2 = 0.5 * I + c2[:, None, None] * P + c3[:, None, None] * P2
    return g1, g2


def _gamma_derivative(phi: np.ndarray, y: np.ndarray, order: int) -> np.ndarray:
    """d (Gamma y) / d phi to first order in phi, batched over steps."""
    c0, c1 = (0.5, 1.0 / 6.0) if order == 1 else (1.0 / 6.0, 1.0 / 24.0)
    return -c0 * hat_batch(y) - c1 * (hat_batch(np.cross(phi, y)) + hat_batch(phi) @ hat_batch(y))


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    omega: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, float).reshape(3).copy())
        object.__setattr__(self, "accel", np.asarray(self.accel, float).reshape(3).copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "ImuBias":
        x = np.asarray(x, float).reshape(6)
        return cls(x[:3], x[3:])


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities."""

    gyro_density: float = 1e-3  # rad/s/sqrt(Hz)
    accel_density: float = 1e-2  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 1e-4  # m/s^3/sqrt(Hz)


@dataclass(frozen=True)
class ImuStream:
    """Time-sorted IMU samples stored as arrays."""

    t: np.ndarray
    omega: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, float).reshape(-1)
        if t.size and np.any(np.diff(t) <= 0):
            raise NonMonotoneTime("IMU timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "omega", np.asarray(self.omega, float).reshape(-1, 3))
        object.__setattr__(self, "accel", np.asarray(self.accel, float).reshape(-1, 3))

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuStream":
        if len(samples) == 0:
            raise EmptySampleSet("no IMU samples")
        return cls(
            np.array([s.timestamp for s in samples]),
            np.array([s.omega for s in samples]),
            np.array([s.accel for s in samples]),
        )

    def interpolate(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Linear interpolation of gyro and accel (clamped at the ends)."""
        times = np.atleast_1d(np.asarray(times, float))
        om = np.column_stack([np.interp(times, self.t, self.omega[:, a]) for a in range(3)])
        ac = np.column_stack([np.interp(times, self.t, self.accel[:, a]) for a in range(3)])
        return om, ac


@dataclass(frozen=True)
class ImuSteps:
    """Integration steps between two keyframe times.

    ``t`` holds the N+1 cut times, ``omega``/``accel`` the N per-step values.
    ``omega_start``/``omega_end`` are the gyro readings at the interval ends,
    used for lever-arm velocity terms.
    """

    t: np.ndarray
    omega: np.ndarray
    accel: np.ndarray
    omega_start: np.ndarray
    omega_end: np.ndarray

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def __len__(self) -> int:
        return len(self.omega)


def build_steps(
    stream: ImuStream,
    t0: float,
    t1: float,
    hold: str = "linear",
    extra_cuts: Optional[np.ndarray] = None,
) -> ImuSteps:
    """Cut the stream into steps covering [t0, t1].

    ``hold="linear"`` treats the signal as piecewise linear between samples
    and uses its mean over each step (second-order accurate).
    ``hold="zoh"`` holds each sample until the next one.
    """
    if stream.t.size == 0:
        raise EmptySampleSet("no IMU samples")
    if not t1 > t0:
        raise NonMonotoneTime(f"interval end {t1} not after start {t0}")
    inner = stream.t[(stream.t > t0 + _TIME_EPS) & (stream.t < t1 - _TIME_EPS)]
    cuts = [np.array([t0, t1]), inner]
    if extra_cuts is not None and len(extra_cuts):
        ec = np.asarray(extra_cuts, float)
        cuts.append(ec[(ec > t0 + _TIME_EPS) & (ec < t1 - _TIME_EPS)])
    t = np.unique(np.concatenate(cuts))
    om_cut, ac_cut = stream.interpolate(t)
    if hold == "linear":
        omega = 0.5 * (om_cut[:-1] + om_cut[1:])
        accel = 0.5 * (ac_cut[:-1] + ac_cut[1:])
    elif hold == "zoh":
        idx = np.searchsorted(stream.t, t[:-1] + _TIME_EPS, side="right") - 1
        if idx[0] < 0:
            raise EmptySampleSet(f"no IMU sample at or before t={t0}")
        omega = stream.omega[idx]
        accel = stream.accel[idx]
    else:
        raise ValueError(f"unknown hold mode {hold!r}")
    return ImuSteps(t, omega, accel, om_cut[0].copy(), om_cut[-1].copy())


def steps_from_samples(samples: Sequence[ImuSample]) -> ImuSteps:
    """Zero-order-hold steps from a raw sample list (N samples, N-1 steps)."""
    if len(samples) < 2:
        raise EmptySampleSet("need at least two samples to form a step")
    stream = ImuStream.from_samples(samples)
    return build_steps(stream, stream.t[0], stream.t[-1], hold="zoh")


def _as_steps(samples) -> ImuSteps:
    if isinstance(samples, ImuSteps):
        if len(samples) == 0:
            raise EmptySampleSet("no integration steps")
        return samples
    return steps_from_samples(samples)


# ---------------------------------------------------------------------------
# Gyro / accelerometer


@dataclass(frozen=True)
class GyroCache:
    """Per-step rotation data: dR[k] = dR_{i,k} for k = 0..N."""

    steps: ImuSteps
    bias_gyro: np.ndarray
    dR: np.ndarray
    step_R: np.ndarray
    jr: np.ndarray
    dR_dbg: np.ndarray  # (N+1, 3, 3) bias Jacobian of each dR_{i,k}
    covariance: np.ndarray
    phi: np.ndarray  # (N, 3) step rotation vectors
    gamma1: np.ndarray  # (N, 3, 3)
    gamma2: np.ndarray  # (N, 3, 3)


def _exclusive_cumsum(x: np.ndarray) -> np.ndarray:
    """Running sum over axis 0 that excludes the current element."""
    out = np.zeros_like(x)
    np.cumsum(x[:-1], axis=0, out=out[1:])
    return out


def _reverse_cumsum(x: np.ndarray) -> np.ndarray:
    """S[m] = sum_{i >= m} x[i] for m = 0..N, with S[N] = 0."""
    out = np.zeros((len(x) + 1,) + x.shape[1:])
    out[:-1] = np.cumsum(x[::-1], axis=0)[::-1]
    return out


def integrate_gyro(samples, bias: ImuBias, gyro_density: float = 0.0) -> tuple[np.ndarray, np.ndarray, GyroCache]:
    """Rotation increment, its 3x3 covariance and the per-step cache."""
    steps = _as_steps(samples)
    dt = steps.dt
    phi = (steps.omega - bias.gyro) * dt[:, None]
    step_R = exp_so3_batch(phi)
    jr = right_jacobian_batch(phi)
    n = len(dt)
    dR = np.empty((n + 1, 3, 3))
    dR[0] = np.eye(3)
    for k in range(n):
        dR[k + 1] = dR[k] @ step_R[k]
    # dR_dbg[k] = -dR[k]^T sum_{j<k} dR[j+1] Jr_j dt_j
    terms = dR[1:] @ jr * dt[:, None, None]
    cum = np.concatenate([np.zeros((1, 3, 3)), np.cumsum(terms, axis=0)])
    dR_dbg = -np.transpose(dR, (0, 2, 1)) @ cum
    cov = np.zeros((3, 3))
    q = gyro_density**2
    if q > 0.0 and n:
        # Noise of step k reaches the end through dR[n]^T dR[k+1] Jr_k.
        G = dR[n].T @ dR[1:] @ jr
        cov = q * np.einsum("k,kij,klj->il", dt, G, G)
    g1, g2 = step_gammas(phi)
    cache = GyroCache(steps, bias.gyro.copy(), dR, step_R, jr, dR_dbg, 0.5 * (cov + cov.T), phi, g1, g2)
    return dR[-1].copy(), cache.covariance, cache


@dataclass(frozen=True)
class PreintegratedImu:
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    covariance: np.ndarray  # 9x9, order (rotation, velocity, position)
    bias_lin: ImuBias
    dt_total: float
    gyro: GyroCache
    dR_dbg: np.ndarray
    dv_dbg: np.ndarray
    dv_dba: np.ndarray
    dp_dbg: np.ndarray
    dp_dba: np.ndarray
    noise: ImuNoise

    @property
    def steps(self) -> ImuSteps:
        return self.gyro.steps

    def bias_delta(self, bias: ImuBias) -> tuple[np.ndarray, np.ndarray]:
        return bias.gyro - self.bias_lin.gyro, bias.accel - self.bias_lin.accel

    def corrected(self, bias: ImuBias) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First-order bias-corrected (dR, dv, dp)."""
        dbg, dba = self.bias_delta(bias)
        dR = self.delta_R @ exp_so3(self.dR_dbg @ dbg)
        dv = self.delta_v + self.dv_dbg @ dbg + self.dv_dba @ dba
        dp = self.delta_p + self.dp_dbg @ dbg + self.dp_dba @ dba
        return dR, dv, dp

    def needs_reintegration(self, bias: ImuBias, threshold: float = BIAS_REINTEGRATION_THRESHOLD) -> bool:
        dbg, dba = self.bias_delta(bias)
        return bool(max(np.abs(dbg).max(), np.abs(dba).max()) > threshold)

    def reintegrated(self, bias: ImuBias) -> "PreintegratedImu":
        return preintegrate_imu(self.steps, bias, self.noise)


def integrate_accel(samples, bias: ImuBias, gyro: GyroCache, noise: ImuNoise | None = None) -> PreintegratedImu:
    """Velocity/position increments and the joint 9x9 covariance."""
    steps = _as_steps(samples) if not isinstance(samples, GyroCache) else samples.steps
    noise = noise or ImuNoise(0.0, 0.0, 0.0, 0.0)
    h = steps.dt
    n = len(h)
    acc = steps.accel - bias.accel
    qg, qa = noise.gyro_density**2, noise.accel_density**2
    R = gyro.dR[:-1]
    JR = gyro.dR_dbg[:-1]
    h1 = h[:, None]
    h3 = h[:, None, None]
    y1 = np.einsum("kij,kj->ki", gyro.gamma1, acc)
    y2 = np.einsum("kij,kj->ki", gyro.gamma2, acc)
    Ry1 = np.einsum("kij,kj->ki", R, y1)
    Ry2 = np.einsum("kij,kj->ki", R, y2)
    dv_k = _exclusive_cumsum(Ry1 * h1)  # velocity increment at the start of each step
    dv = (Ry1 * h1).sum(axis=0)
    dp = (dv_k * h1 + Ry2 * h1**2).sum(axis=0)
    # Step contributions and their bias derivatives (dphi/dbg = -h I).
    Ry1h = R @ hat_batch(y1)
    Ry2h = R @ hat_batch(y2)
    dva_bg = -Ry1h @ JR - h3 * R @ _gamma_derivative(gyro.phi, acc, 1)
    dva_ba = -R @ gyro.gamma1
    dpa_bg = -Ry2h @ JR - h3 * R @ _gamma_derivative(gyro.phi, acc, 2)
    dpa_ba = -R @ gyro.gamma2
    dv_dbg = (dva_bg * h3).sum(axis=0)
    dv_dba = (dva_ba * h3).sum(axis=0)
    dp_dbg = (_exclusive_cumsum(dva_bg * h3) * h3 + dpa_bg * h3**2).sum(axis=0)
    dp_dba = (_exclusive_cumsum(dva_ba * h3) * h3 + dpa_ba * h3**2).sum(axis=0)
    cov = np.zeros((9, 9))
    if (qg > 0.0 or qa > 0.0) and n:
        # A rotation error at the start of step m maps to the end state through
        # dR[n]^T dR[m], -SA[m] dR[m] and -SB[m] dR[m] (reverse sums below).
        remaining = steps.t[-1] - steps.t[1:]  # time left after each step
        a = hat_batch(Ry1) * h3
        b = hat_batch(Ry2) * h3**2
        SA = _reverse_cumsum(a)
        SB = _reverse_cumsum(b + a * remaining[:, None, None])
        Rm = gyro.dR[1:]
        Gg = np.concatenate([gyro.dR[-1].T @ Rm, -SA[1:] @ Rm, -SB[1:] @ Rm], axis=1) @ gyro.jr  # (n, 9, 3)
        Ba_v = R @ gyro.gamma1 * h3
        Ba_p = R @ gyro.gamma2 * h3**2
        Ga = np.concatenate([np.zeros((n, 3, 3)), Ba_v, Ba_p + Ba_v * remaining[:, None, None]], axis=1)
        cov = qg * np.einsum("k,kij,klj->il", h, Gg, Gg) + qa * np.einsum("k,kij,klj->il", 1.0 / h, Ga, Ga)
    return PreintegratedImu(
        delta_R=gyro.dR[-1].copy(),
        delta_v=dv,
        delta_p=dp,
        covariance=0.5 * (cov + cov.T),
        bias_lin=ImuBias(gyro.bias_gyro, bias.accel),
        dt_total=float(steps.duration),
        gyro=gyro,
        dR_dbg=gyro.dR_dbg[-1].copy(),
        dv_dbg=dv_dbg,
        dv_dba=dv_dba,
        dp_dbg=dp_dbg,
        dp_dba=dp_dba,
        noise=noise,
    )


def preintegrate_imu(samples, bias: ImuBias, noise: ImuNoise | None = None) -> PreintegratedImu:
    """Gyro and accelerometer pre-integration in one call."""
    noise = noise or ImuNoise(0.0, 0.0, 0.0, 0.0)
    steps = _as_steps(samples)
    _, _, gyro = integrate_gyro(steps, bias, noise.gyro_density)
    return integrate_accel(steps, bias, gyro, noise)


# ---------------------------------------------------------------------------
# DVL


def dvl_step_weights(
    step_t: np.ndarray, dvl_t: np.ndarray, hold: str = "zoh"
) -> tuple[np.ndarray, np.ndarray]:
    """Weights mapping DVL measurements onto integration steps.

    Returns ``(indices, W)`` where ``W[k, m]`` is the weight of measurement
    ``indices[m]`` in the velocity held over step k. ``zoh`` holds the most
    recent measurement, ``linear`` averages the linear interpolant over the
    step (steps are assumed to be cut at measurement times) and ``cubic``
    averages a cubic Hermite interpolant with Simpson's rule.
    """
    dvl_t = np.asarray(dvl_t, float)
    ta, tb = step_t[:-1], step_t[1:]
    n = len(ta)
    if dvl_t.size == 0 or ta[0] < dvl_t[0] - _TIME_EPS:
        raise MissingVelocity(f"no DVL measurement precedes t={ta[0]:.6f}")
    if hold == "zoh":
        idx = np.searchsorted(dvl_t, ta + _TIME_EPS, side="right") - 1
        used, inv = np.unique(idx, return_inverse=True)
        W = np.zeros((n, len(used)))
        W[np.arange(n), inv] = 1.0
        return used, W
    if hold == "linear":
        full = 0.5 * (interpolation_weights(ta, dvl_t, cubic=False) + interpolation_weights(tb, dvl_t, cubic=False))
    elif hold == "cubic":
        tm = 0.5 * (ta + tb)
        full = (interpolation_weights(ta, dvl_t, cubic=True) + 4.0 * interpolation_weights(tm, dvl_t, cubic=True)
                + interpolation_weights(tb, dvl_t, cubic=True)) / 6.0
    else:
        raise ValueError(f"unknown hold mode {hold!r}")
    used = np.flatnonzero(np.abs(full).sum(axis=0) > 0)
    return used, full[:, used]


def interpolation_weights(t: np.ndarray, knots: np.ndarray, cubic: bool) -> np.ndarray:
    """Rows of weights that interpolate knot values at times ``t``.

    ``cubic`` uses a cubic Hermite interpolant with finite-difference
    tangents; beyond the last knot the value is held.
    """
    M = len(knots)
    n = len(t)
    W = np.zeros((n, M))
    rows = np.arange(n)
    if M == 1:
        W[:, 0] = 1.0
        return W
    j = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, M - 2)
    span = knots[j + 1] - knots[j]
    s = np.clip((t - knots[j]) / span, 0.0, 1.0)
    if not cubic:
        np.add.at(W, (rows, j), 1.0 - s)
        np.add.at(W, (rows, j + 1), s)
        return W
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    np.add.at(W, (rows, j), h00)
    np.add.at(W, (rows, j + 1), h01)
    # Tangent at knot q: derivative of the quadratic through three knots.
    for q, hq in ((j, h10), (j + 1, h11)):
        if M == 2:
            c = hq * span / (knots[1] - knots[0])
            np.add.at(W, (rows, 1), c)
            np.add.at(W, (rows, 0), -c)
            continue
        a = np.clip(q - 1, 0, M - 3)
        x = knots[q]
        x0, x1, x2 = knots[a], knots[a + 1], knots[a + 2]
        d0 = ((x - x1) + (x - x2)) / ((x0 - x1) * (x0 - x2))
        d1 = ((x - x0) + (x - x2)) / ((x1 - x0) * (x1 - x2))
        d2 = ((x - x0) + (x - x1)) / ((x2 - x0) * (x2 - x1))
        for off, d in ((0, d0), (1, d1), (2, d2)):
            np.add.at(W, (rows, a + off), hq * span * d)
    return W


@dataclass(frozen=True)
class PreintegratedDvl:
    """DVL translation increment with the cache needed to re-evaluate it."""

    delta_p_bar: np.ndarray
    covariance: np.ndarray
    extrinsic_lin: np.ndarray  # R_ID used for the sum
    gyro: GyroCache
    velocities: np.ndarray  # (M, 3) DVL-frame velocities
    weights: np.ndarray  # (N, M)
    velocity_cov: np.ndarray  # (M, 3, 3)
    gyro_density: float
    J_phi: np.ndarray  # d dp_bar / d phi_ID (left increment)
    J_bg: np.ndarray  # d dp_bar / d b_g
    G: np.ndarray  # (M, 3, 3) d dp_bar / d v_m

    @property
    def bias_gyro_lin(self) -> np.ndarray:
        return self.gyro.bias_gyro

    @property
    def step_velocities(self) -> np.ndarray:
        return self.weights @ self.velocities

    def corrected(self, bias_gyro: np.ndarray) -> np.ndarray:
        return self.delta_p_bar + self.J_bg @ (np.asarray(bias_gyro) - self.bias_gyro_lin)


def integrate_dvl(
    gyro: GyroCache,
    body_velocities: np.ndarray,
    R_ID: np.ndarray,
    weights: Optional[np.ndarray] = None,
    velocity_cov: Optional[np.ndarray] = None,
    gyro_density: float = 0.0,
) -> PreintegratedDvl:
    """DVL translation pre-integration over the steps of ``gyro``.

    ``body_velocities`` is either one velocity per step, or M measurements
    combined through ``weights`` (N, M) from :func:`dvl_step_weights`.
    ``velocity_cov`` is a single 3x3 or an (M, 3, 3) stack.
    """
    v = np.asarray(body_velocities, float).reshape(-1, 3)
    n = len(gyro.steps)
    if weights is None:
        if len(v) != n:
            raise MissingVelocity(f"expected {n} step velocities, got {len(v)}")
        weights = np.eye(n)
    weights = np.asarray(weights, float)
    if weights.shape != (n, len(v)):
        raise ValueError("weights shape does not match steps x velocities")
    if np.any(weights.sum(axis=1) <= 0.0):
        raise MissingVelocity("an integration step has no DVL velocity")
    m = len(v)
    if velocity_cov is None:
        vcov = np.zeros((m, 3, 3))
    else:
        vcov = np.broadcast_to(np.asarray(velocity_cov, float), (m, 3, 3)).copy()
    return _dvl_sum(gyro, v, weights, vcov, gyro_density, np.asarray(R_ID, float))


def _dvl_sum(gyro, v, weights, vcov, gyro_density, R_ID) -> PreintegratedDvl:
    dt = gyro.steps.dt
    dR = gyro.dR[:-1] @ gyro.gamma1  # rotation averaged over each step
    vk = weights @ v  # (N, 3)
    Av = vk @ R_ID.T
    dRAv = np.einsum("kij,kj->ki", dR, Av)
    dp_bar = (dRAv * dt[:, None]).sum(axis=0)
    RAv_hat = dR @ hat_batch(Av)  # dR_ik Gamma1_k (R_ID v_k)^
    J_phi = -(RAv_hat * dt[:, None, None]).sum(axis=0)
    g1Av = np.einsum("kij,kj->ki", gyro.gamma1, Av)
    J_bg_k = (-gyro.dR[:-1] @ hat_batch(g1Av) @ gyro.dR_dbg[:-1]
              - dt[:, None, None] * gyro.dR[:-1] @ _gamma_derivative(gyro.phi, Av, 1))
    J_bg = (J_bg_k * dt[:, None, None]).sum(axis=0)
    dRA = dR @ R_ID  # (N, 3, 3)
    G = np.einsum("km,kij->mij", weights * dt[:, None], dRA)
    cov = np.einsum("mij,mjk,mlk->il", G, vcov, G)
    q = gyro_density**2
    if q > 0.0 and len(dt):
        # Gyro noise of step k reaches the sum through -SE[k+1] dR[k+1] Jr_k.
        e = hat_batch(np.einsum("kij,kj->ki", gyro.dR[:-1], g1Av)) * dt[:, None, None]
        SE = _reverse_cumsum(e)
        Gg = SE[1:] @ gyro.dR[1:] @ gyro.jr
        cov = cov + q * np.einsum("k,kij,klj->il", dt, Gg, Gg)
    return PreintegratedDvl(
        delta_p_bar=dp_bar,
        covariance=0.5 * (cov + cov.T),
        extrinsic_lin=R_ID.copy(),
        gyro=gyro,
        velocities=v,
        weights=weights,
        velocity_cov=vcov,
        gyro_density=gyro_density,
        J_phi=J_phi,
        J_bg=J_bg,
        G=G,
    )


def reintegrate_dvl_full(p: PreintegratedDvl, new_R_ID: np.ndarray) -> PreintegratedDvl:
    """Exact recomputation of the sum (and its covariance) with a new R_ID."""
    return _dvl_sum(p.gyro, p.velocities, p.weights, p.velocity_cov, p.gyro_density, np.asarray(new_R_ID, float))


def reintegrate_dvl_velocities(p: PreintegratedDvl, velocities: np.ndarray) -> PreintegratedDvl:
    """Exact recomputation with replaced DVL velocities."""
    v = np.asarray(velocities, float).reshape(p.velocities.shape)
    return _dvl_sum(p.gyro, v, p.weights, p.velocity_cov, p.gyro_density, p.extrinsic_lin)


def reintegrate_dvl_bias(p: PreintegratedDvl, bias_gyro: np.ndarray) -> PreintegratedDvl:
    """Re-run the gyro recursion at a new bias and re-sum."""
    _, _, gyro = integrate_gyro(p.gyro.steps, ImuBias(bias_gyro), p.gyro_density)
    return _dvl_sum(gyro, p.velocities, p.weights, p.velocity_cov, p.gyro_density, p.extrinsic_lin)


def bias_correction_jacobian_phi(p: PreintegratedDvl, delta_bg: np.ndarray) -> np.ndarray:
    """d (J_bg delta_bg) / d phi_ID, the R_ID dependence of the bias correction."""
    g = p.gyro
    dt = g.steps.dt
    db = np.asarray(delta_bg, float)
    Av_hat = hat_batch(p.step_velocities @ p.extrinsic_lin.T)
    rot = g.dR_dbg[:-1] @ db
    # J_bg_k db is linear in R_ID v_k; K_k collects the Gamma1 derivative part.
    dbh = hat(db)
    ph = hat_batch(g.phi)
    K = 0.5 * dbh + (dbh @ ph + ph @ dbh) / 6.0
    terms = (-g.dR[:-1] @ hat_batch(rot) @ g.gamma1 @ Av_hat
             + dt[:, None, None] * g.dR[:-1] @ K @ Av_hat)
    return (terms * dt[:, None, None]).sum(axis=0)


def dvl_jacobian_wrt_extrinsic_rotation(p: PreintegratedDvl) -> np.ndarray:
    """d dp_bar / d phi for the left increment R_ID <- Exp(phi) R_ID."""
    return p.J_phi.copy()


def dvl_jacobian_wrt_body_velocity(p: PreintegratedDvl, steps: Optional[slice] = None) -> np.ndarray:
    """Sum of dR_ik Gamma1_k R_ID dt_k over the given steps (all steps by default)."""
    dt = p.gyro.steps.dt
    sel = slice(None) if steps is None else steps
    dRA = (p.gyro.dR[:-1] @ p.gyro.gamma1)[sel] @ p.extrinsic_lin
    return (dRA * dt[sel][:, None, None]).sum(axis=0)


def approx_update_dvl(
    p: PreintegratedDvl,
    delta_phi: Optional[np.ndarray] = None,
    delta_v: Optional[np.ndarray] = None,
    sigma_phi: float = SIGMA_PHI,
    sigma_v: float = SIGMA_V,
) -> tuple[np.ndarray, bool]:
    """Linearized update of dp_bar for a small extrinsic or velocity change.

    ``delta_phi`` is a left increment of R_ID. ``delta_v`` is either one
    3-vector added to every measurement or an (M, 3) array. When the
    increment norm reaches its threshold the sum is fully re-evaluated.
    """
    if delta_phi is not None:
        d = np.asarray(delta_phi, float).reshape(3)
        if np.linalg.norm(d) < sigma_phi:
            return p.delta_p_bar + p.J_phi @ d, True
        return reintegrate_dvl_full(p, exp_so3(d) @ p.extrinsic_lin).delta_p_bar, False
    if delta_v is not None:
        d = np.broadcast_to(np.asarray(delta_v, float), p.velocities.shape)
        if np.linalg.norm(d, axis=1).max() < sigma_v:
            return p.delta_p_bar + np.einsum("mij,mj->i", p.G, d), True
        return reintegrate_dvl_velocities(p, p.velocities + d).delta_p_bar, False
    return p.delta_p_bar.copy(), True


def relative_rotation_increment(R_new: np.ndarray, R_lin: np.ndarray) -> np.ndarray:
    """Left increment phi with R_new = Exp(phi) R_lin."""
    return log_so3(np.asarray(R_new) @ np.asarray(R_lin).T)


def with_velocity_cov(p: PreintegratedDvl, velocity_cov: np.ndarray) -> PreintegratedDvl:
    vcov = np.broadcast_to(np.asarray(velocity_cov, float), p.velocity_cov.shape).copy()
    return replace(p, velocity_cov=vcov)
