"""Synthetic visual-inertial data: analytic trajectory, random landmark field,
and noisy IMU/camera streams with an injected camera-IMU time offset.

The trajectory is a sum of per-axis position sinusoids with sinusoidal
roll/pitch/yaw on top, so velocity, acceleration, and body angular rate all
have closed forms. The camera sits at the body origin with identity extrinsic
rotation and projects through an ideal pinhole.

Timestamp convention: a camera frame sampled at time t (IMU clock) is stamped
t - injected_td, so that IMU time = camera stamp + injected_td.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import DEFAULT_CAMERA, CameraModel
from .se3 import Pose, Rotation, so3_exp

GRAVITY_W = np.array([0.0, 0.0, -9.81])


def quantize_ns(t: float) -> float:
    """Round a time to an exact nanosecond grid point."""
    return round(t * 1e9) * 1e-9


@dataclass
class TrajectoryParams:
    """Sum-of-sinusoids curve; amplitudes/frequencies per axis.

    Attitude frequencies sit well above the position ones so each sliding
    window sees real angular acceleration; that is what separates a camera-IMU
    time offset from bias/velocity adjustments.
    """

    pos_amplitude: tuple = (5.0, 5.0, 2.0)          # meters
    pos_frequency: tuple = (0.6, 0.9, 1.2)          # rad/s
    pos_phase: tuple = (0.0, math.pi / 2.0, 0.0)    # rad
    att_amplitude: tuple = (0.3, 0.3, 0.3)          # rad, roll/pitch/yaw
    att_frequency: tuple = (1.9, 2.3, 1.5)          # rad/s
    att_phase: tuple = (0.0, 0.0, 0.0)


@dataclass
class SimConfig:
    duration: float = 30.0          # seconds
    imu_rate: float = 100.0         # Hz
    cam_rate: float = 10.0          # Hz
    feature_count: int = 500
    world_half_extent: float = 30.0  # meters; cube [-h, +h]^3
    pixel_noise_sigma: float = 0.5   # pixels
    accel_noise_sigma: float = 0.01  # m/s^2 per sample
    gyro_noise_sigma: float = 0.001  # rad/s per sample
    injected_td: float = 0.0         # seconds
    rng_seed: int = 0
    trajectory: TrajectoryParams = field(default_factory=TrajectoryParams)
    camera: CameraModel = DEFAULT_CAMERA
    min_depth: float = 0.1           # visibility cutoff, meters

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.imu_rate <= 0 or self.cam_rate <= 0:
            raise ValueError("rates must be positive")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of cam_rate")
        if self.feature_count <= 0:
            raise ValueError("feature_count must be positive")

    def with_overrides(self, **kwargs) -> "SimConfig":
        return replace(self, **kwargs)


@dataclass
class KinematicSample:
    t: float
    pose: Pose                    # body in world
    velocity: np.ndarray          # m/s, world
    acceleration: np.ndarray      # m/s^2, world
    angular_velocity: np.ndarray  # rad/s, body


@dataclass
class ImuSample:
    t: float
    gyro: np.ndarray   # rad/s, body
    accel: np.ndarray  # m/s^2, specific force, body
    t_ns: int | None = None  # exact integer stamp when read from file


@dataclass
class FrameObservation:
    t_stamped: float
    frame_id: int
    observations: list  # [(feature_id, u, v)], pixels unless normalized=True
    normalized: bool = False


def generate_trajectory(config: SimConfig, t: float) -> KinematicSample:
    """Evaluate the analytic curve at time t in [0, duration]."""
    if t < -1e-9 or t > config.duration + 1e-9:
        raise ValueError(f"t={t} outside [0, {config.duration}]")
    tp = config.trajectory
    a = np.asarray(tp.pos_amplitude, dtype=float)
    w = np.asarray(tp.pos_frequency, dtype=float)
    ph = np.asarray(tp.pos_phase, dtype=float)
    arg = w * t + ph
    # p(t) measured relative to its t-independent offset so zero phases start
    # at the origin
    pos = a * (np.sin(arg) - np.sin(ph))
    vel = a * w * np.cos(arg)
    acc = -a * w * w * np.sin(arg)

    aa = np.asarray(tp.att_amplitude, dtype=float)
    aw = np.asarray(tp.att_frequency, dtype=float)
    aph = np.asarray(tp.att_phase, dtype=float)
    ang = aa * np.sin(aw * t + aph)            # roll, pitch, yaw
    angd = aa * aw * np.cos(aw * t + aph)
    roll, pitch, yaw = ang
    rolld, pitchd, yawd = angd
    rot = (
        so3_exp([0.0, 0.0, yaw])
        * so3_exp([0.0, pitch, 0.0])
        * so3_exp([roll, 0.0, 0.0])
    )
    # body rates for the z-y-x Euler composition above
    omega = np.array(
        [
            rolld - yawd * math.sin(pitch),
            pitchd * math.cos(roll) + yawd * math.cos(pitch) * math.sin(roll),
            -pitchd * math.sin(roll) + yawd * math.cos(pitch) * math.cos(roll),
        ]
    )
    return KinematicSample(t, Pose(rot, pos), vel, acc, omega)


def generate_features(count: int, half_extent: float, seed: int) -> np.ndarray:
    """Uniform landmark positions in the cube [-half_extent, half_extent]^3."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    return rng.uniform(-half_extent, half_extent, size=(count, 3))


def synthesize_imu(config: SimConfig) -> list:
    """IMU stream at imu_rate: body rates and specific force plus noise."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.rng_seed, spawn_key=(1,))
    )
    n = int(round(config.duration * config.imu_rate)) + 1
    dt = 1.0 / config.imu_rate
    samples = []
    for i in range(n):
        t = quantize_ns(i * dt)
        kin = generate_trajectory(config, min(t, config.duration))
        r_wb = kin.pose.rotation.matrix()
        accel = r_wb.T @ (kin.acceleration - GRAVITY_W)
        gyro = kin.angular_velocity.copy()
        if config.gyro_noise_sigma > 0:
            gyro = gyro + rng.normal(0.0, config.gyro_noise_sigma, 3)
        if config.accel_noise_sigma > 0:
            accel = accel + rng.normal(0.0, config.accel_noise_sigma, 3)
        samples.append(ImuSample(t, gyro, accel))
    return samples


def synthesize_observations(config: SimConfig, features: np.ndarray) -> list:
    """Project visible landmarks at cam_rate; adds pixel noise, no offset."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.rng_seed, spawn_key=(2,))
    )
    cam = config.camera
    n = int(round(config.duration * config.cam_rate)) + 1
    dt = 1.0 / config.cam_rate
    frames = []
    for k in range(n):
        t = quantize_ns(k * dt)
        kin = generate_trajectory(config, min(t, config.duration))
        r_wc = kin.pose.rotation.matrix()
        p_wc = kin.pose.translation
        pts_c = (features - p_wc) @ r_wc  # == R^T (X - p) for each row
        obs = []
        # noise draws must not depend on visibility, so streams with
        # different geometry but the same seed stay reproducible per feature
        noise = (
            rng.normal(0.0, config.pixel_noise_sigma, size=(len(features), 2))
            if config.pixel_noise_sigma > 0
            else np.zeros((len(features), 2))
        )
        for fid in range(len(features)):
            z = pts_c[fid, 2]
            if z <= config.min_depth:
                continue
            u = cam.fx * pts_c[fid, 0] / z + cam.cx + noise[fid, 0]
            v = cam.fy * pts_c[fid, 1] / z + cam.cy + noise[fid, 1]
            if 0.0 <= u < cam.width and 0.0 <= v < cam.height:
                obs.append((fid, float(u), float(v)))
        frames.append(FrameObservation(t, k, obs))
    return frames


def apply_time_offset(frames: list, td: float) -> list:
    """Stamp camera frames with (sample time - td); content unchanged.

    Arithmetic runs on the integer nanosecond grid, so shifting by td and
    then by -td restores ns-quantized stamps bit-exactly.
    """
    td_ns = round(td * 1e9)
    return [
        FrameObservation(
            (round(f.t_stamped * 1e9) - td_ns) * 1e-9,
            f.frame_id,
            f.observations,
            f.normalized,
        )
        for f in frames
    ]


@dataclass
class SimData:
    config: SimConfig
    features: np.ndarray
    imu: list
    frames: list  # stamped with the injected offset

    def true_state(self, t: float):
        return generate_trajectory(self.config, t)


def simulate(config: SimConfig) -> SimData:
    """Full deterministic generation for one trial."""
    features = generate_features(
        config.feature_count, config.world_half_extent, config.rng_seed
    )
    imu = synthesize_imu(config)
    frames = synthesize_observations(config, features)
    frames = apply_time_offset(frames, config.injected_td)
    return SimData(config, features, imu, frames)
