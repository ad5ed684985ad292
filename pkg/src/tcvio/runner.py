"""Experiment drivers: single runs and Monte-Carlo sweeps.

A run simulates (or replays) a sensor stream, feeds the estimator in
timestamp order, and writes the trajectory, a ground-truth trajectory when
simulating, and a calibration report. Monte-Carlo sweeps fan trials out over
worker processes with per-trial seeds `base_seed + trial_index`.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import data_io
from .estimator import EstimatorConfig, SlidingWindowEstimator
from .metrics import CalibrationTrial, TrajectoryRecord, align_trajectory, ate_rmse
from .preintegration import ImuState
from .sim import SimConfig, simulate

try:  # the small dense workloads here lose badly to BLAS thread spin
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def limit_blas_threads():
    if threadpool_limits is not None:
        threadpool_limits(limits=1)


@dataclass
class RunResult:
    total_td: float
    td_variance: float
    estimate_count: int
    trajectory: list          # (t, Pose)
    gt_trajectory: list | None
    ate: float | None
    trace: list
    diverged: bool


def _initial_state_from_sim(data, t0):
    kin = data.true_state(float(np.clip(t0, 0.0, data.config.duration)))
    return ImuState(kin.pose.translation, kin.velocity, kin.pose.rotation)


def _initial_state_from_dict(d):
    from .se3 import Rotation

    q = d.get("q_wxyz", [1.0, 0.0, 0.0, 0.0])
    return ImuState(
        np.asarray(d.get("p", [0.0, 0.0, 0.0]), dtype=float),
        np.asarray(d.get("v", [0.0, 0.0, 0.0]), dtype=float),
        Rotation(q[0], q[1], q[2], q[3]),
    )


def feed_estimator(est: SlidingWindowEstimator, imu, frames):
    """Interleave streams: IMU is fed ahead of each frame's compensated time
    by two sample intervals so boundary interpolation has both neighbors."""
    imu_iter = iter(imu)
    pending = next(imu_iter, None)
    lookahead = 2.0 * (imu[1].t - imu[0].t) if len(imu) > 1 else 0.02
    estimates = 0
    for frame in frames:
        t_used = frame.t_stamped + est.compensated_td
        while pending is not None and pending.t <= t_used + lookahead:
            est.process_imu(pending)
            pending = next(imu_iter, None)
        out = est.process_frame(frame)
        if out is not None:
            estimates += 1
    return estimates


def run_simulation(
    sim_config: SimConfig,
    est_config: EstimatorConfig,
    compute_ate: bool = True,
) -> RunResult:
    """One simulate-and-estimate run."""
    limit_blas_threads()
    data = simulate(sim_config)
    if not data.frames or len(data.imu) < 2:
        raise ValueError("simulation produced no usable streams")
    init = _initial_state_from_sim(data, data.frames[0].t_stamped)
    est = SlidingWindowEstimator(est_config, initial_state=init)
    diverged = False
    try:
        feed_estimator(est, data.imu, data.frames)
    except Exception:
        diverged = True
    trajectory = est.trajectory_poses()
    gt = [
        (t, data.true_state(float(np.clip(t, 0.0, sim_config.duration))).pose)
        for t, _ in trajectory
    ]
    ate = None
    if compute_ate and len(trajectory) >= 3 and not diverged:
        est_rec = TrajectoryRecord(
            np.array([t for t, _ in trajectory]), [p for _, p in trajectory]
        )
        gt_rec = TrajectoryRecord(
            np.array([t for t, _ in gt]), [p for _, p in gt]
        )
        ate = ate_rmse(align_trajectory(est_rec, gt_rec), gt_rec)
    td_var = est.trace[-1]["td_variance"] if est.trace else float("nan")
    if not est.trace:
        diverged = True
    return RunResult(
        total_td=est.total_td,
        td_variance=td_var,
        estimate_count=len(est.trace),
        trajectory=trajectory,
        gt_trajectory=gt,
        ate=ate,
        trace=est.trace,
        diverged=diverged,
    )


def run_replay(replay: data_io.ReplayConfig, est_config: EstimatorConfig) -> RunResult:
    limit_blas_threads()
    imu = data_io.read_imu_csv(replay.imu_csv)
    frames = data_io.read_feature_tracks(replay.features_csv, est_config.camera)
    if len(imu) < 2 or not frames:
        raise data_io.DataFormatError("replay inputs are empty")
    init = (
        _initial_state_from_dict(replay.initial_state)
        if replay.initial_state
        else None
    )
    est = SlidingWindowEstimator(est_config, initial_state=init)
    feed_estimator(est, imu, frames)
    td_var = est.trace[-1]["td_variance"] if est.trace else float("nan")
    return RunResult(
        total_td=est.total_td,
        td_variance=td_var,
        estimate_count=len(est.trace),
        trajectory=est.trajectory_poses(),
        gt_trajectory=None,
        ate=None,
        trace=est.trace,
        diverged=not est.trace,
    )


def write_run_outputs(result: RunResult, out_dir: str, label: str = "run"):
    data_io.validate_output_dir(out_dir)
    traj_path = os.path.join(out_dir, f"{label}_trajectory.txt")
    data_io.write_trajectory_tum(traj_path, result.trajectory)
    paths = {"trajectory": traj_path}
    if result.gt_trajectory is not None:
        gt_path = os.path.join(out_dir, f"{label}_groundtruth.txt")
        data_io.write_trajectory_tum(gt_path, result.gt_trajectory)
        paths["groundtruth"] = gt_path
    report = {
        "total_td_s": result.total_td,
        "td_variance_s2": result.td_variance,
        "keyframe_estimates": result.estimate_count,
        "ate_m": result.ate,
        "diverged": result.diverged,
        "td_trace": [
            {
                "t": r["t"],
                "total_td_s": r["total_td"],
                "delta_td_s": r["td"],
                "td_variance_s2": r["td_variance"],
            }
            for r in result.trace
        ],
    }
    report_path = os.path.join(out_dir, f"{label}_report.json")
    data_io.write_calibration_report(report_path, report)
    paths["report"] = report_path
    return paths


# --------------------------------------------------------------------------
# Monte-Carlo
# --------------------------------------------------------------------------

def _mc_trial(args):
    sim_config, est_config, seed = args
    cfg = replace(sim_config, rng_seed=seed)
    try:
        result = run_simulation(cfg, est_config)
    except Exception:
        return seed, None
    if result.diverged or not np.isfinite(result.total_td):
        return seed, None
    return seed, CalibrationTrial(
        true_td=cfg.injected_td,
        estimated_td=result.total_td,
        td_variance=result.td_variance,
        ate=result.ate if result.ate is not None else float("nan"),
    )


def monte_carlo(
    sim_config: SimConfig,
    est_config: EstimatorConfig,
    offsets_s,
    trials: int,
    base_seed: int = 0,
    jobs: int = 1,
):
    """Run `trials` per offset; returns (trials_by_offset, failures_by_offset).

    Seeds are base_seed + trial index, shared across offsets so offset sweeps
    see identical noise realizations.
    """
    if trials < 2:
        raise ValueError("need at least 2 trials")
    work = []
    for td in offsets_s:
        cfg = replace(sim_config, injected_td=float(td))
        for k in range(trials):
            work.append((cfg, est_config, base_seed + k))
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=limit_blas_threads
        ) as pool:
            outcomes = list(pool.map(_mc_trial, work, chunksize=1))
    else:
        outcomes = [_mc_trial(w) for w in work]

    by_offset = {}
    failures = {}
    idx = 0
    for td in offsets_s:
        good = []
        failed = 0
        for _ in range(trials):
            _, trial = outcomes[idx]
            idx += 1
            if trial is None:
                failed += 1
            else:
                good.append(trial)
        by_offset[float(td)] = good
        failures[float(td) * 1e3] = failed
    return by_offset, failures
