"""File formats and run configuration.

Formats
-------
IMU CSV:       "timestamp_ns, w_x, w_y, w_z, a_x, a_y, a_z" (gyro rad/s,
               accel m/s^2), '#' comment lines allowed, strictly increasing
               integer-nanosecond stamps.
Feature CSV:   "frame_id, timestamp_ns, feature_id, u_px, v_px", rows grouped
               by frame, frames in time order, (frame, feature) unique.
Trajectory:    TUM text, "t x y z qx qy qz qw", t with 9 decimal places.
Config:        YAML with nested sections; unknown keys are rejected.

Readers reject malformed data with line numbers rather than skipping it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .camera import CameraModel
from .estimator import EstimatorConfig
from .preintegration import ImuNoiseParams
from .se3 import Pose, Rotation
from .sim import FrameObservation, ImuSample, SimConfig, TrajectoryParams


class DataFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# IMU CSV
# --------------------------------------------------------------------------

def read_imu_csv(path):
    """Parse an IMU CSV into ImuSample list; stamps become float seconds.

    Exact nanosecond stamps are kept on each sample (t_ns) so write-read
    roundtrips are lossless.
    """
    samples = []
    last_ns = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 7 fields, got {len(parts)}"
                )
            try:
                ns = int(parts[0])
                vals = [float(x) for x in parts[1:]]
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError(f"{path}:{lineno}: non-finite value")
            if last_ns is not None and ns <= last_ns:
                raise DataFormatError(
                    f"{path}:{lineno}: timestamp {ns} not increasing"
                )
            last_ns = ns
            samples.append(
                ImuSample(
                    ns * 1e-9,
                    np.array(vals[0:3]),
                    np.array(vals[3:6]),
                    t_ns=ns,
                )
            )
    return samples


def write_imu_csv(path, samples):
    with open(path, "w", encoding="utf-8") as f:
        f.write("#timestamp_ns,w_x,w_y,w_z,a_x,a_y,a_z\n")
        for s in samples:
            ns = s.t_ns if s.t_ns is not None else round(s.t * 1e9)
            f.write(
                f"{ns},{s.gyro[0]:.12g},{s.gyro[1]:.12g},{s.gyro[2]:.12g},"
                f"{s.accel[0]:.12g},{s.accel[1]:.12g},{s.accel[2]:.12g}\n"
            )


# --------------------------------------------------------------------------
# feature tracks
# --------------------------------------------------------------------------

def read_feature_tracks(path, camera: CameraModel):
    """Parse a feature-track CSV into FrameObservation list with normalized
    image-plane coordinates."""
    frames = []
    current = None  # (frame_id, t_ns, [(fid, xn, yn)])
    seen_frames = set()
    seen_feature = set()
    last_ns = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 5 fields, got {len(parts)}"
                )
            try:
                frame_id = int(parts[0])
                ns = int(parts[1])
                fid = int(parts[2])
                u = float(parts[3])
                v = float(parts[4])
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
            if (frame_id, fid) in seen_feature:
                raise DataFormatError(
                    f"{path}:{lineno}: duplicate (frame {frame_id}, feature {fid})"
                )
            seen_feature.add((frame_id, fid))
            xy = camera.normalize(np.array([u, v]))
            if current is not None and frame_id == current[0]:
                if ns != current[1]:
                    raise DataFormatError(
                        f"{path}:{lineno}: frame {frame_id} has two timestamps"
                    )
                current[2].append((fid, float(xy[0]), float(xy[1])))
                continue
            if frame_id in seen_frames:
                raise DataFormatError(
                    f"{path}:{lineno}: frame {frame_id} rows are not contiguous"
                )
            if last_ns is not None and ns <= last_ns:
                raise DataFormatError(
                    f"{path}:{lineno}: frame timestamp {ns} not increasing"
                )
            if current is not None:
                frames.append(_close_frame(current))
            seen_frames.add(frame_id)
            last_ns = ns
            current = (frame_id, ns, [(fid, float(xy[0]), float(xy[1]))])
    if current is not None:
        frames.append(_close_frame(current))
    return frames


def _close_frame(current):
    frame_id, ns, obs = current
    return FrameObservation(ns * 1e-9, frame_id, obs, normalized=True)


def write_feature_tracks(path, frames, camera: CameraModel | None = None):
    """Write frames; normalized frames need `camera` to restore pixels."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("#frame_id,timestamp_ns,feature_id,u_px,v_px\n")
        for fr in frames:
            ns = round(fr.t_stamped * 1e9)
            for fid, u, v in fr.observations:
                if fr.normalized:
                    if camera is None:
                        raise DataFormatError(
                            "camera model required to write normalized frames"
                        )
                    uv = camera.denormalize(np.array([u, v]))
                    u, v = float(uv[0]), float(uv[1])
                f.write(f"{fr.frame_id},{ns},{fid},{u:.12g},{v:.12g}\n")


# --------------------------------------------------------------------------
# trajectories (TUM text format)
# --------------------------------------------------------------------------

def write_trajectory_tum(path, records):
    """records: iterable of (t_seconds, Pose); quaternion written x y z w."""
    with open(path, "w", encoding="utf-8") as f:
        for t, pose in records:
            q = pose.rotation.q
            p = pose.translation
            f.write(
                f"{t:.9f} {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                f"{q[1]:.9g} {q[2]:.9g} {q[3]:.9g} {q[0]:.9g}\n"
            )


def read_trajectory_tum(path):
    """Returns (timestamps, poses) lists."""
    times, poses = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 8 fields, got {len(parts)}"
                )
            try:
                vals = [float(x) for x in parts]
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
            times.append(vals[0])
            qx, qy, qz, qw = vals[4], vals[5], vals[6], vals[7]
            poses.append(Pose(Rotation(qw, qx, qy, qz), np.array(vals[1:4])))
    return times, poses


# --------------------------------------------------------------------------
# calibration report / Monte-Carlo table
# --------------------------------------------------------------------------

def write_calibration_report(path, report: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def read_calibration_report(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_monte_carlo_csv(path, summaries, failures=None):
    """One row per offset, mirroring the calibration-results table shape."""
    failures = failures or {}
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            "true_td_ms,trials,failed,mean_td_ms,rmse_td_ms,"
            "mean_nees,nees_exceed_fraction\n"
        )
        for s in summaries:
            f.write(
                f"{s.true_td_ms:.6g},{s.trials},{failures.get(s.true_td_ms, 0)},"
                f"{s.mean_td_ms:.6g},{s.rmse_td_ms:.6g},"
                f"{s.mean_nees:.6g},{s.nees_exceed_fraction:.6g}\n"
            )


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass
class ReplayConfig:
    imu_csv: str
    features_csv: str
    initial_state: dict | None = None  # {p:[3], v:[3], q_wxyz:[4]}


@dataclass
class RunConfig:
    mode: str                       # "simulate" | "replay"
    output_dir: str = "out"
    seed: int = 0
    sim: SimConfig | None = None
    replay: ReplayConfig | None = None
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)


_CAMERA_KEYS = {"width", "height", "fx", "fy", "cx", "cy"}
_SIM_KEYS = {
    "duration", "imu_rate", "cam_rate", "feature_count", "world_half_extent",
    "pixel_noise_sigma", "accel_noise_sigma", "gyro_noise_sigma",
    "injected_td", "trajectory", "camera",
}
_TRAJ_KEYS = {
    "pos_amplitude", "pos_frequency", "pos_phase",
    "att_amplitude", "att_frequency", "att_phase",
}
_EST_KEYS = {
    "window_size", "parallax_threshold_px", "min_tracked_features",
    "feature_mode", "calibrate_time_offset", "td_prior_sigma", "huber_delta",
    "pixel_noise_sigma", "max_solver_iterations", "imu_noise",
    "prior_accel_bias_sigma", "prior_gyro_bias_sigma",
}
_IMU_NOISE_KEYS = {"gyro_sigma", "accel_sigma", "gyro_walk_sigma", "accel_walk_sigma"}
_REPLAY_KEYS = {"imu_csv", "features_csv", "initial_state"}
_TOP_KEYS = {"mode", "output_dir", "seed", "simulation", "replay", "estimator", "camera"}


def _check_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _camera_from(section: dict) -> CameraModel:
    _check_keys(section, _CAMERA_KEYS, "camera")
    return CameraModel(
        fx=float(section.get("fx", 460.0)),
        fy=float(section.get("fy", 460.0)),
        cx=float(section.get("cx", 320.0)),
        cy=float(section.get("cy", 240.0)),
        width=int(section.get("width", 640)),
        height=int(section.get("height", 480)),
    )


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(raw, _TOP_KEYS, "config")
    mode = raw.get("mode")
    if mode not in ("simulate", "replay"):
        raise ConfigError(f"mode must be 'simulate' or 'replay', got {mode!r}")

    camera = _camera_from(raw.get("camera", {}) or {})

    sim_cfg = None
    replay_cfg = None
    if mode == "simulate":
        section = dict(raw.get("simulation", {}) or {})
        _check_keys(section, _SIM_KEYS, "simulation")
        traj_raw = dict(section.pop("trajectory", {}) or {})
        _check_keys(traj_raw, _TRAJ_KEYS, "simulation.trajectory")
        traj = TrajectoryParams(
            **{k: tuple(v) if isinstance(v, list) else v for k, v in traj_raw.items()}
        )
        if "camera" in section:
            camera = _camera_from(dict(section.pop("camera") or {}))
        sim_cfg = SimConfig(
            trajectory=traj,
            camera=camera,
            rng_seed=int(raw.get("seed", 0)),
            **{k: v for k, v in section.items()},
        )
    else:
        section = dict(raw.get("replay", {}) or {})
        _check_keys(section, _REPLAY_KEYS, "replay")
        for req in ("imu_csv", "features_csv"):
            if req not in section:
                raise ConfigError(f"replay.{req} is required")
        replay_cfg = ReplayConfig(**section)

    est_raw = dict(raw.get("estimator", {}) or {})
    _check_keys(est_raw, _EST_KEYS, "estimator")
    noise_raw = dict(est_raw.pop("imu_noise", {}) or {})
    _check_keys(noise_raw, _IMU_NOISE_KEYS, "estimator.imu_noise")
    imu_noise = ImuNoiseParams(**noise_raw) if noise_raw else ImuNoiseParams()
    for sig in ("gyro_sigma", "accel_sigma"):
        if getattr(imu_noise, sig) <= 0:
            raise ConfigError(f"estimator.imu_noise.{sig} must be positive")
    if est_raw.get("pixel_noise_sigma", 0.5) <= 0:
        raise ConfigError("estimator.pixel_noise_sigma must be positive")
    if est_raw.get("td_prior_sigma", 0.15) <= 0:
        raise ConfigError("estimator.td_prior_sigma must be positive")
    est_cfg = EstimatorConfig(camera=camera, imu_noise=imu_noise, **est_raw)

    return RunConfig(
        mode=mode,
        output_dir=str(raw.get("output_dir", "out")),
        seed=int(raw.get("seed", 0)),
        sim=sim_cfg,
        replay=replay_cfg,
        estimator=est_cfg,
    )


def validate_output_dir(path):
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write_probe")
    try:
        with open(probe, "w") as f:
            f.write("ok")
        os.remove(probe)
    except OSError as e:
        raise ConfigError(f"output directory {path!r} not writable: {e}") from None
