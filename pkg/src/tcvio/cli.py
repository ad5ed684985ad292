"""Command-line entry point.

Subcommands:
  simulate    generate dataset files (IMU CSV, feature CSV, ground truth)
  run         simulate or replay per config, estimate, write outputs
  montecarlo  repeated trials per injected offset, aggregated to a CSV table
  evaluate    ATE / RPE between two TUM trajectory files

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 estimation
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__, data_io, runner
from .metrics import (
    MetricsError,
    TrajectoryRecord,
    align_trajectory,
    ate_rmse,
    monte_carlo_summary,
    relative_pose_error,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4


def build_parser():
    p = argparse.ArgumentParser(
        prog="tcvio",
        description="Visual-inertial estimation with online camera-IMU "
        "time offset calibration",
    )
    p.add_argument("--version", action="version", version=f"tcvio {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--out", default=None, help="output directory override")
        sp.add_argument("--seed", type=int, default=None, help="base seed override")

    sp = sub.add_parser("simulate", help="write simulated dataset files")
    add_common(sp)
    sp.add_argument(
        "--td-override", type=float, default=None, metavar="MS",
        help="injected camera-IMU offset in milliseconds",
    )

    sp = sub.add_parser("run", help="run the estimator once")
    add_common(sp)
    sp.add_argument("--td-override", type=float, default=None, metavar="MS")
    sp.add_argument("--calibration", choices=("on", "off"), default="on")

    sp = sub.add_parser("montecarlo", help="Monte-Carlo calibration sweep")
    add_common(sp)
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument(
        "--offsets", default="5,15,30",
        help="comma-separated injected offsets in milliseconds",
    )
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--calibration", choices=("on", "off"), default="on")

    sp = sub.add_parser("evaluate", help="compare trajectories (TUM format)")
    sp.add_argument("estimate", help="estimated trajectory file")
    sp.add_argument("groundtruth", help="ground-truth trajectory file")
    sp.add_argument("--rpe-segment", type=float, default=1.0)
    sp.add_argument("--rpe-unit", choices=("s", "m"), default="s")
    sp.add_argument("--out", default=None, help="write metrics JSON here")
    return p


def _load_config(args):
    if not os.path.isfile(args.config):
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    try:
        cfg = data_io.load_config(args.config)
    except (data_io.ConfigError, ValueError) as e:
        print(f"error: bad config: {e}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.sim is not None:
            cfg.sim = replace(cfg.sim, rng_seed=args.seed)
    td_override = getattr(args, "td_override", None)
    if td_override is not None:
        if cfg.sim is None:
            print("error: --td-override needs simulate mode", file=sys.stderr)
            raise SystemExit(EXIT_USAGE)
        cfg.sim = replace(cfg.sim, injected_td=td_override * 1e-3)
    if getattr(args, "calibration", "on") == "off":
        cfg.estimator = replace(cfg.estimator, calibrate_time_offset=False)
    try:
        data_io.validate_output_dir(cfg.output_dir)
    except data_io.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return cfg


def cmd_simulate(args):
    cfg = _load_config(args)
    if cfg.mode != "simulate" or cfg.sim is None:
        print("error: simulate command needs mode: simulate", file=sys.stderr)
        return EXIT_USAGE
    from .sim import simulate

    data = simulate(cfg.sim)
    out = cfg.output_dir
    data_io.write_imu_csv(os.path.join(out, "imu.csv"), data.imu)
    data_io.write_feature_tracks(os.path.join(out, "features.csv"), data.frames)
    gt = [
        (f.t_stamped + cfg.sim.injected_td,
         data.true_state(min(max(f.t_stamped + cfg.sim.injected_td, 0.0), cfg.sim.duration)).pose)
        for f in data.frames
    ]
    data_io.write_trajectory_tum(os.path.join(out, "groundtruth.txt"), gt)
    print(
        f"wrote {len(data.imu)} IMU samples, {len(data.frames)} frames, "
        f"injected offset {cfg.sim.injected_td * 1e3:.3f} ms -> {out}"
    )
    return EXIT_OK


def cmd_run(args):
    cfg = _load_config(args)
    try:
        if cfg.mode == "simulate":
            result = runner.run_simulation(cfg.sim, cfg.estimator)
        else:
            result = runner.run_replay(cfg.replay, cfg.estimator)
    except data_io.DataFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:
        print(f"error: estimation failed: {e}", file=sys.stderr)
        return EXIT_ESTIMATION
    if result.diverged:
        print("error: estimator diverged", file=sys.stderr)
        return EXIT_ESTIMATION
    paths = runner.write_run_outputs(result, cfg.output_dir)
    print(f"total time offset: {result.total_td * 1e3:+.4f} ms")
    print(f"offset std dev:    {np.sqrt(result.td_variance) * 1e3:.4f} ms")
    if result.ate is not None:
        print(f"ATE (4-DOF aligned): {result.ate * 100:.3f} cm")
    print(f"outputs: {paths}")
    return EXIT_OK


def cmd_montecarlo(args):
    cfg = _load_config(args)
    if cfg.mode != "simulate" or cfg.sim is None:
        print("error: montecarlo needs mode: simulate", file=sys.stderr)
        return EXIT_USAGE
    if args.trials < 2:
        print("error: need at least 2 trials", file=sys.stderr)
        return EXIT_USAGE
    try:
        offsets_ms = [float(x) for x in args.offsets.split(",") if x.strip()]
    except ValueError:
        print(f"error: bad --offsets {args.offsets!r}", file=sys.stderr)
        return EXIT_USAGE
    offsets_s = [x * 1e-3 for x in offsets_ms]
    by_offset, failures = runner.monte_carlo(
        cfg.sim, cfg.estimator, offsets_s, args.trials,
        base_seed=cfg.seed, jobs=args.jobs,
    )
    summaries = []
    print(
        f"{'true[ms]':>9} {'mean[ms]':>9} {'rmse[ms]':>9} {'nees':>7} "
        f"{'>95%':>6} {'ate[cm]':>8} {'ok':>3}"
    )
    for td in offsets_s:
        trials = by_offset[td]
        if len(trials) < 2:
            print(f"{td * 1e3:9.2f}  (too many failures: {failures[td * 1e3]})")
            continue
        s = monte_carlo_summary(trials)
        summaries.append(s)
        ates = [t.ate for t in trials if np.isfinite(t.ate)]
        ate_cm = 100 * float(np.mean(ates)) if ates else float("nan")
        print(
            f"{s.true_td_ms:9.2f} {s.mean_td_ms:9.3f} {s.rmse_td_ms:9.3f} "
            f"{s.mean_nees:7.2f} {s.nees_exceed_fraction:6.1%} {ate_cm:8.2f} "
            f"{s.trials:3d}"
        )
    csv_path = os.path.join(cfg.output_dir, "montecarlo.csv")
    data_io.write_monte_carlo_csv(csv_path, summaries, failures)
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_evaluate(args):
    for path in (args.estimate, args.groundtruth):
        if not os.path.isfile(path):
            print(f"error: trajectory file not found: {path}", file=sys.stderr)
            return EXIT_USAGE
    try:
        et, ep = data_io.read_trajectory_tum(args.estimate)
        gt, gp = data_io.read_trajectory_tum(args.groundtruth)
        est = TrajectoryRecord(np.array(et), ep)
        ref = TrajectoryRecord(np.array(gt), gp)
    except (data_io.DataFormatError, MetricsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    try:
        aligned = align_trajectory(est, ref)
    except MetricsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    ate = ate_rmse(aligned, ref)
    rpe = relative_pose_error(aligned, ref, args.rpe_segment, unit=args.rpe_unit)
    print(f"ATE RMSE (4-DOF aligned): {ate:.6f} m over {len(aligned)} poses")
    print(
        f"RPE ({args.rpe_segment:g}{args.rpe_unit}, {rpe.count} segments): "
        f"trans mean {rpe.translation_mean:.6f} m, rmse {rpe.translation_rmse:.6f} m; "
        f"rot mean {np.degrees(rpe.rotation_mean):.4f} deg, "
        f"rmse {np.degrees(rpe.rotation_rmse):.4f} deg"
    )
    if args.out:
        data_io.validate_output_dir(args.out)
        data_io.write_calibration_report(
            os.path.join(args.out, "evaluation.json"),
            {
                "ate_rmse_m": ate,
                "rpe_segment": args.rpe_segment,
                "rpe_unit": args.rpe_unit,
                "rpe_translation_rmse_m": rpe.translation_rmse,
                "rpe_rotation_rmse_rad": rpe.rotation_rmse,
            },
        )
    return EXIT_OK


def main(argv=None):
    runner.limit_blas_threads()
    args = build_parser().parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "run": cmd_run,
        "montecarlo": cmd_montecarlo,
        "evaluate": cmd_evaluate,
    }
    try:
        return handlers[args.command](args)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
