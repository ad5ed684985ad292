"""Trajectory and calibration accuracy metrics.

Monocular-inertial estimates share the world frame only up to translation and
yaw (gravity pins roll/pitch, the IMU pins scale), so absolute errors are
computed after a 4-DOF alignment. NEES follows the usual filter-consistency
definition, (estimate - truth)^2 / reported variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .se3 import Pose, Rotation, so3_exp, so3_log

CHI2_95_1DOF = 3.84  # 95% chi-square bound, 1 degree of freedom


class MetricsError(ValueError):
    pass


@dataclass
class TrajectoryRecord:
    timestamps: np.ndarray  # strictly increasing, seconds
    poses: list             # Pose per timestamp

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.timestamps) != len(self.poses):
            raise MetricsError("timestamps and poses length mismatch")
        if np.any(np.diff(self.timestamps) <= 0):
            raise MetricsError("timestamps must be strictly increasing")

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def __len__(self):
        return len(self.poses)


@dataclass
class CalibrationTrial:
    true_td: float      # seconds
    estimated_td: float
    td_variance: float
    ate: float          # meters

    def __post_init__(self):
        if self.td_variance <= 0:
            raise MetricsError("td_variance must be positive")


def associate(est: TrajectoryRecord, gt: TrajectoryRecord, max_dt: float = 0.010):
    """Nearest-timestamp association; returns index pairs (i_est, i_gt)."""
    pairs = []
    gt_t = gt.timestamps
    for i, t in enumerate(est.timestamps):
        j = int(np.searchsorted(gt_t, t))
        best, best_dt = None, max_dt
        for cand in (j - 1, j):
            if 0 <= cand < len(gt_t):
                dt = abs(gt_t[cand] - t)
                if dt <= best_dt:
                    best, best_dt = cand, dt
        if best is not None:
            pairs.append((i, best))
    return pairs


def align_trajectory(est: TrajectoryRecord, gt: TrajectoryRecord) -> TrajectoryRecord:
    """Least-squares yaw + translation alignment of est onto gt (4 DOF)."""
    pairs = associate(est, gt)
    if len(pairs) < 3:
        raise MetricsError(f"only {len(pairs)} associated pose pairs; need >= 3")
    p_est = np.array([est.poses[i].translation for i, _ in pairs])
    p_gt = np.array([gt.poses[j].translation for _, j in pairs])
    ce = p_est.mean(axis=0)
    cg = p_gt.mean(axis=0)
    de = p_est - ce
    dg = p_gt - cg
    # maximize trace(Rz' * sum(dg de^T)) over yaw
    a = float(np.sum(de[:, 0] * dg[:, 1] - de[:, 1] * dg[:, 0]))
    b = float(np.sum(de[:, 0] * dg[:, 0] + de[:, 1] * dg[:, 1]))
    yaw = math.atan2(a, b)
    r_z = so3_exp([0.0, 0.0, yaw])
    t = cg - r_z.apply(ce)
    aligned = [
        Pose(r_z * p.rotation, r_z.apply(p.translation) + t) for p in est.poses
    ]
    return TrajectoryRecord(est.timestamps.copy(), aligned)


def ate_rmse(est: TrajectoryRecord, gt: TrajectoryRecord) -> float:
    """RMS translational error over associated pairs (no alignment applied)."""
    pairs = associate(est, gt)
    if not pairs:
        raise MetricsError("no associated pose pairs")
    d = np.array(
        [
            est.poses[i].translation - gt.poses[j].translation
            for i, j in pairs
        ]
    )
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


@dataclass
class RpeStats:
    count: int
    translation_mean: float
    translation_median: float
    translation_rmse: float
    rotation_mean: float
    rotation_median: float
    rotation_rmse: float

    @classmethod
    def empty(cls):
        nan = float("nan")
        return cls(0, nan, nan, nan, nan, nan, nan)


def relative_pose_error(
    est: TrajectoryRecord, gt: TrajectoryRecord, segment: float, unit: str = "s"
) -> RpeStats:
    """Per-segment relative-motion discrepancy.

    `segment` is a time span (unit="s") or a distance along the ground-truth
    path (unit="m"). Returns empty statistics when no segment fits.
    """
    if unit not in ("s", "m"):
        raise MetricsError(f"unknown RPE unit {unit!r}")
    pairs = associate(est, gt)
    if len(pairs) < 2:
        return RpeStats.empty()
    e_poses = [est.poses[i] for i, _ in pairs]
    g_poses = [gt.poses[j] for _, j in pairs]
    times = np.array([est.timestamps[i] for i, _ in pairs])
    if unit == "m":
        p = np.array([g.translation for g in g_poses])
        dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
        coord = dist
    else:
        coord = times - times[0]

    t_err, r_err = [], []
    end = 0
    for start in range(len(pairs)):
        target = coord[start] + segment
        while end < len(pairs) and coord[end] < target:
            end += 1
        if end >= len(pairs):
            break
        rel_g = g_poses[start].inverse() * g_poses[end]
        rel_e = e_poses[start].inverse() * e_poses[end]
        err = rel_g.inverse() * rel_e
        t_err.append(np.linalg.norm(err.translation))
        r_err.append(np.linalg.norm(so3_log(err.rotation)))
    if not t_err:
        return RpeStats.empty()
    t_err = np.array(t_err)
    r_err = np.array(r_err)
    return RpeStats(
        count=len(t_err),
        translation_mean=float(t_err.mean()),
        translation_median=float(np.median(t_err)),
        translation_rmse=float(np.sqrt(np.mean(t_err**2))),
        rotation_mean=float(r_err.mean()),
        rotation_median=float(np.median(r_err)),
        rotation_rmse=float(np.sqrt(np.mean(r_err**2))),
    )


@dataclass
class MonteCarloSummary:
    true_td_ms: float
    trials: int
    mean_td_ms: float
    rmse_td_ms: float
    mean_nees: float
    nees_exceed_fraction: float  # fraction above the 95% chi-square bound


def monte_carlo_summary(trials) -> MonteCarloSummary:
    """Aggregate calibration trials that share one true offset."""
    if len(trials) < 2:
        raise MetricsError("need at least 2 trials")
    true_tds = {t.true_td for t in trials}
    if len(true_tds) != 1:
        raise MetricsError(f"mixed true_td values: {sorted(true_tds)}")
    true_td = trials[0].true_td
    est = np.array([t.estimated_td for t in trials])
    var = np.array([t.td_variance for t in trials])
    err = est - true_td
    nees = err**2 / var
    return MonteCarloSummary(
        true_td_ms=true_td * 1e3,
        trials=len(trials),
        mean_td_ms=float(est.mean() * 1e3),
        rmse_td_ms=float(np.sqrt(np.mean(err**2)) * 1e3),
        mean_nees=float(nees.mean()),
        nees_exceed_fraction=float(np.mean(nees > CHI2_95_1DOF)),
    )
