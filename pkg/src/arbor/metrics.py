"""Trajectory and calibration accuracy metrics."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AssociationError, ContractError
from .sim import TRUTH_SENSOR

TIME_MATCH_TOL = 1e-6


@dataclass
class MetricsReport:
    ate_rmse: float
    calib_abs: Optional[list]
    calib_rel: Optional[list]
    final_cost: Optional[float]
    keyframes: int
    wall_time: float

    def as_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "calib_abs": self.calib_abs,
            "calib_rel": self.calib_rel,
            "final_cost": self.final_cost,
            "keyframes": self.keyframes,
            "wall_time": self.wall_time,
        }


def compute_ate(estimates, truth_records) -> float:
    """Root-mean-square position error over keyframes, gauge left absolute.

    ``estimates`` is a list of (t, x, y) tuples (heading ignored); every
    timestamp must have a ground-truth pose within 1e-6 s.
    """
    poses = [(r.t, r.data) for r in truth_records if r.sensor == TRUTH_SENSOR]
    poses.sort(key=lambda e: e[0])
    times = [t for t, _ in poses]
    if not estimates:
        raise AssociationError("no estimates to score")
    sq_sum = 0.0
    for t, x, y in estimates:
        i = bisect.bisect_left(times, t - TIME_MATCH_TOL)
        if i >= len(times) or abs(times[i] - t) > TIME_MATCH_TOL:
            raise AssociationError(f"no ground-truth pose within 1e-6s of t={t}")
        gx, gy = poses[i][1][0], poses[i][1][1]
        sq_sum += (x - gx) ** 2 + (y - gy) ** 2
    return float(np.sqrt(sq_sum / len(estimates)))


def compute_calib_error(c_est, c_true):
    """Per-component absolute and relative calibration errors."""
    c_est = np.asarray(c_est, dtype=float)
    c_true = np.asarray(c_true, dtype=float)
    if c_est.shape != c_true.shape:
        raise ContractError(
            f"calibration dims disagree: {c_est.shape} vs {c_true.shape}"
        )
    abs_err = np.abs(c_est - c_true)
    rel_err = abs_err / np.abs(c_true)
    return abs_err, rel_err
