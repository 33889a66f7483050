"""Trajectory accuracy against ground truth.

Estimated poses are associated with ground-truth poses by nearest timestamp
within a tolerance, the whole estimate is rigidly moved so that its first
matched pose coincides with the ground truth, and translation and rotation
errors are summarized as RMSE and standard deviation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import NoOverlap
from .geometry import log_so3

MATCH_TOLERANCE = 5e-3  # s


@dataclass
class PoseSeries:
    t: np.ndarray
    R: np.ndarray  # (N, 3, 3)
    p: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.t = np.asarray(self.t, float).reshape(-1)
        self.R = np.asarray(self.R, float).reshape(-1, 3, 3)
        self.p = np.asarray(self.p, float).reshape(-1, 3)
        if not (len(self.t) == len(self.R) == len(self.p)):
            raise ValueError("pose series arrays differ in length")


@dataclass
class EvaluationReport:
    translation_rmse: float
    rotation_rmse_deg: float
    translation_std: float
    rotation_std_deg: float
    t: np.ndarray
    translation_errors: np.ndarray  # (N, 3) per-axis position error after alignment
    rotation_errors_deg: np.ndarray  # (N,) geodesic angle
    alignment_R: np.ndarray = field(default_factory=lambda: np.eye(3))
    alignment_p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_matched(self) -> int:
        return len(self.t)

    def to_dict(self) -> dict:
        return {
            "matched": self.n_matched,
            "translation_rmse_m": self.translation_rmse,
            "rotation_rmse_deg": self.rotation_rmse_deg,
            "translation_std_m": self.translation_std,
            "rotation_std_deg": self.rotation_std_deg,
            "alignment": {"R": self.alignment_R.tolist(), "p": self.alignment_p.tolist()},
        }

    def summary(self) -> str:
        return (f"matched poses: {self.n_matched}\n"
                f"translation RMSE: {self.translation_rmse:.6f} m (std {self.translation_std:.6f} m)\n"
                f"rotation RMSE: {self.rotation_rmse_deg:.6f} deg (std {self.rotation_std_deg:.6f} deg)")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", "ex", "ey", "ez", "e_norm", "e_rot_deg"])
        for t, e, r in zip(self.t, self.translation_errors, self.rotation_errors_deg):
            w.writerow([f"{t:.6f}", *(f"{x:.9g}" for x in e), f"{np.linalg.norm(e):.9g}", f"{r:.9g}"])
        return buf.getvalue()


def match_timestamps(t_est: np.ndarray, t_gt: np.ndarray, tolerance: float = MATCH_TOLERANCE):
    """Index pairs (i_est, i_gt) of nearest ground-truth stamps within ``tolerance``."""
    t_est = np.asarray(t_est, float)
    t_gt = np.asarray(t_gt, float)
    if len(t_gt) == 0 or len(t_est) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(t_gt)
    ts = t_gt[order]
    j = np.clip(np.searchsorted(ts, t_est), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(len(t_est), int)
    if len(ts) > 1:
        left_closer = np.abs(t_est - ts[j - 1]) <= np.abs(ts[j] - t_est)
        j = np.where(left_closer, j - 1, j)
    ok = np.abs(ts[j] - t_est) <= tolerance
    return np.flatnonzero(ok), order[j[ok]]


def evaluate(estimate: PoseSeries, ground_truth: PoseSeries, tolerance: float = MATCH_TOLERANCE) -> EvaluationReport:
    """First-pose-aligned RMSE and STD of translation and rotation errors."""
    ie, ig = match_timestamps(estimate.t, ground_truth.t, tolerance)
    if len(ie) < 2:
        raise NoOverlap(f"only {len(ie)} estimate poses have ground truth within {tolerance} s")
    Re, pe = estimate.R[ie], estimate.p[ie]
    Rg, pg = ground_truth.R[ig], ground_truth.p[ig]
    # T_align = T_gt0 T_est0^-1 moves the first matched estimate onto the truth.
    Ra = Rg[0] @ Re[0].T
    pa = pg[0] - Ra @ pe[0]
    Rs = Ra @ Re
    ps = pe @ Ra.T + pa
    et = ps - pg
    er = np.array([np.degrees(np.linalg.norm(log_so3(g.T @ r))) for g, r in zip(Rg, Rs)])
    en = np.linalg.norm(et, axis=1)
    return EvaluationReport(
        translation_rmse=float(np.sqrt(np.mean(en**2))),
        rotation_rmse_deg=float(np.sqrt(np.mean(er**2))),
        translation_std=float(np.std(en)),
        rotation_std_deg=float(np.std(er)),
        t=estimate.t[ie],
        translation_errors=et,
        rotation_errors_deg=er,
        alignment_R=Ra,
        alignment_p=pa,
    )


def evaluate_estimate(estimate, gt, tolerance: float = MATCH_TOLERANCE) -> EvaluationReport:
    """Convenience wrapper for objects exposing ``t``, ``R`` and ``p``."""
    return evaluate(PoseSeries(estimate.t, estimate.R, estimate.p), PoseSeries(gt.t, gt.R, gt.p), tolerance)
