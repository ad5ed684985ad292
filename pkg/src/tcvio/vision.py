"""Reprojection residuals parameterized by the camera-IMU time offset.

A tracked feature moves at approximately constant velocity on the image
plane over one frame interval, so an observation taken with a timestamp
error td can be slid along that velocity:

    z(td) = [u, v]^T + td * V

Both residuals below subtract the projection from the shifted observation,
which makes d(residual)/d(td) carry the velocity terms. All quantities are
in normalized image-plane coordinates; pixel measurements are converted on
ingestion (see camera.CameraModel), and the isotropic measurement sigma is
pixel_sigma / focal_length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .se3 import Pose, skew

MIN_DEPTH = 1e-4  # meters; projection barrier for both residuals
MIN_INVERSE_DEPTH = 1e-4  # 1/m; depth < 10 km


@dataclass
class ObservationWithVelocity:
    uv: np.ndarray        # normalized image-plane coordinates
    velocity: np.ndarray  # normalized units per second; zero for a track's first obs
    t: float              # seconds
    frame_id: int = -1
    feature_id: int = -1


def feature_velocity(obs_k, obs_k1, t_k: float, t_k1: float) -> np.ndarray:
    """Image-plane velocity between two consecutive observations of a track."""
    if t_k1 <= t_k:
        raise ValueError(f"timestamps must increase: {t_k} -> {t_k1}")
    return (np.asarray(obs_k1, dtype=float) - np.asarray(obs_k, dtype=float)) / (
        t_k1 - t_k
    )


def shifted_observation(obs: ObservationWithVelocity, td: float) -> np.ndarray:
    """Observation slid along its image-plane velocity by td seconds."""
    return obs.uv + td * obs.velocity


def _proj_jacobian(point):
    """d(perspective division)/d(point) for a camera-frame point."""
    x, y, z = point
    iz = 1.0 / z
    return np.array([[iz, 0.0, -x * iz * iz], [0.0, iz, -y * iz * iz]])


def residual_world_point(
    obs: ObservationWithVelocity, td: float, cam_pose: Pose, point
):
    """Residual of a world-point feature seen in one frame.

        e = z(td) - project(R^T (P - p))

    Returns (residual, jacobians, valid). Jacobian keys: 'pose' (2x6, columns
    [dp, dtheta] with the right/local rotation perturbation), 'point' (2x3),
    'td' (2,). When the camera-frame depth is below the barrier the factor is
    invalid and residual/jacobians are zero.
    """
    r_wc = cam_pose.rotation.matrix()
    x_c = r_wc.T @ (np.asarray(point, dtype=float) - cam_pose.translation)
    if x_c[2] <= MIN_DEPTH:
        zeros = {
            "pose": np.zeros((2, 6)),
            "point": np.zeros((2, 3)),
            "td": np.zeros(2),
        }
        return np.zeros(2), zeros, False
    pj = _proj_jacobian(x_c)
    residual = shifted_observation(obs, td) - np.array(
        [x_c[0] / x_c[2], x_c[1] / x_c[2]]
    )
    j_pose = np.zeros((2, 6))
    j_pose[:, 0:3] = pj @ r_wc.T          # d e / d p
    j_pose[:, 3:6] = -pj @ skew(x_c)      # d e / d theta
    jac = {
        "pose": j_pose,
        "point": -pj @ r_wc.T,
        "td": obs.velocity.copy(),
    }
    return residual, jac, True


def residual_inverse_depth(
    obs_i: ObservationWithVelocity,
    obs_j: ObservationWithVelocity,
    td: float,
    pose_i: Pose,
    pose_j: Pose,
    depth_i: float,
):
    """Two-view residual with the feature at depth_i along the shifted host ray.

    The shifted host observation z_i(td) is lifted to 3D in frame i, taken to
    the world through pose_i, projected into frame j through pose_j, and
    subtracted from the shifted target observation z_j(td):

        e = z_j(td) - project(R_j^T (R_i * depth_i * [z_i(td); 1] + p_i - p_j))

    d e/d td combines the direct V_j term and the chain through V_i (the
    lifted point moves with the host observation).

    Returns (residual, jacobians, valid). Jacobian keys: 'pose_i', 'pose_j'
    (2x6, columns [dp, dtheta]), 'depth' (2,), 'td' (2,).
    """
    zeros = {
        "pose_i": np.zeros((2, 6)),
        "pose_j": np.zeros((2, 6)),
        "depth": np.zeros(2),
        "td": np.zeros(2),
    }
    if depth_i <= MIN_DEPTH:
        return np.zeros(2), zeros, False
    r_i = pose_i.rotation.matrix()
    r_j = pose_j.rotation.matrix()
    zi = shifted_observation(obs_i, td)
    h_i = np.array([zi[0], zi[1], 1.0])
    x_i = depth_i * h_i
    x_w = r_i @ x_i + pose_i.translation
    x_j = r_j.T @ (x_w - pose_j.translation)
    if x_j[2] <= MIN_DEPTH:
        return np.zeros(2), zeros, False

    pj = _proj_jacobian(x_j)
    residual = shifted_observation(obs_j, td) - np.array(
        [x_j[0] / x_j[2], x_j[1] / x_j[2]]
    )
    a = pj @ r_j.T            # 2x3, common chain through frame j
    a_ri = a @ r_i
    j_pose_i = np.zeros((2, 6))
    j_pose_i[:, 0:3] = -a
    j_pose_i[:, 3:6] = a_ri @ skew(x_i)
    j_pose_j = np.zeros((2, 6))
    j_pose_j[:, 0:3] = a
    j_pose_j[:, 3:6] = -pj @ skew(x_j)
    jac = {
        "pose_i": j_pose_i,
        "pose_j": j_pose_j,
        "depth": -a_ri @ h_i,
        "td": obs_j.velocity
        - a_ri @ np.array([obs_i.velocity[0], obs_i.velocity[1], 0.0]) * depth_i,
    }
    return residual, jac, True
