import numpy as np
import pytest

from tcvio.se3 import Pose, so3_exp
from tcvio.vision import (
    ObservationWithVelocity,
    feature_velocity,
    residual_inverse_depth,
    residual_world_point,
    shifted_observation,
)


def obs(uv, velocity=(0.0, 0.0), t=0.0):
    return ObservationWithVelocity(
        np.asarray(uv, float), np.asarray(velocity, float), t
    )


def random_pose(rng, scale=2.0):
    return Pose(so3_exp(rng.normal(size=3) * 0.5), rng.normal(size=3) * scale)


def retract_pose(pose, delta):
    """Right/local pose update matching the factor Jacobian columns."""
    return Pose(pose.rotation * so3_exp(delta[3:6]), pose.translation + delta[0:3])


def project(pose, point):
    x_c = pose.rotation.matrix().T @ (point - pose.translation)
    return np.array([x_c[0] / x_c[2], x_c[1] / x_c[2]]), x_c[2]


# --------------------------------------------------------------------------
# feature velocity / shifted observation
# --------------------------------------------------------------------------

def test_velocity_static_feature_is_zero():
    assert np.allclose(feature_velocity([0.2, 0.1], [0.2, 0.1], 0.0, 0.1), 0.0)


def test_velocity_arithmetic():
    v = feature_velocity([0.10, 0.20], [0.11, 0.195], 0.0, 0.1)
    assert np.allclose(v, [0.10, -0.05], atol=1e-12)


def test_velocity_rejects_non_increasing_timestamps():
    with pytest.raises(ValueError):
        feature_velocity([0, 0], [1, 1], 0.2, 0.2)
    with pytest.raises(ValueError):
        feature_velocity([0, 0], [1, 1], 0.3, 0.2)


def test_velocity_matches_analytic_projection_derivative():
    # camera translating laterally at constant speed past a point 10 m ahead:
    # x_n(t) = -v t / 10, so dx/dt = -v/10
    v_cam = 1.3
    point = np.array([0.0, 0.0, 10.0])
    dt = 0.1

    def normalized_at(t):
        pose = Pose(so3_exp([0, 0, 0]), np.array([v_cam * t, 0.0, 0.0]))
        return project(pose, point)[0]

    vel = feature_velocity(normalized_at(0.0), normalized_at(dt), 0.0, dt)
    analytic = np.array([-v_cam / 10.0, 0.0])
    assert np.linalg.norm(vel - analytic) / np.linalg.norm(analytic) < 0.02


def test_shifted_observation_arithmetic():
    o = obs([0.10, 0.20], velocity=[0.10, -0.05])
    assert np.array_equal(shifted_observation(o, 0.0), o.uv)
    assert np.allclose(shifted_observation(o, 0.01), [0.101, 0.1995], atol=1e-15)
    shifted = shifted_observation(o, 0.01)
    o2 = ObservationWithVelocity(shifted, o.velocity, 0.0)
    assert np.allclose(shifted_observation(o2, -0.01), o.uv, atol=1e-18)


# --------------------------------------------------------------------------
# world-point residual
# --------------------------------------------------------------------------

def test_world_point_consistent_observation_zero_residual():
    rng = np.random.default_rng(31)
    for _ in range(20):
        pose = random_pose(rng)
        point = pose.apply(np.array([rng.normal(), rng.normal(), rng.uniform(2, 10)]))
        z, _ = project(pose, point)
        r, _, valid = residual_world_point(obs(z), 0.0, pose, point)
        assert valid
        assert np.linalg.norm(r) < 1e-12


def test_world_point_residual_equals_td_times_velocity_when_consistent():
    pose = Pose(so3_exp([0.1, -0.2, 0.3]), np.array([1.0, 2.0, -0.5]))
    point = pose.apply(np.array([0.3, -0.2, 5.0]))
    z, _ = project(pose, point)
    o = obs(z, velocity=[0.1, -0.05])
    r, jac, valid = residual_world_point(o, 0.01, pose, point)
    assert valid
    assert np.allclose(r, [0.001, -0.0005], atol=1e-12)
    assert np.array_equal(jac["td"], o.velocity)


def test_world_point_behind_camera_flagged_invalid():
    pose = Pose.identity()
    r, _, valid = residual_world_point(obs([0, 0]), 0.0, pose, [0.0, 0.0, -1.0])
    assert not valid
    assert np.array_equal(r, np.zeros(2))


def test_world_point_jacobians_match_finite_differences():
    rng = np.random.default_rng(32)
    eps = 1e-6
    for _ in range(100):
        pose = random_pose(rng)
        point = pose.apply(np.array([rng.normal(), rng.normal(), rng.uniform(2, 20)]))
        point = point + rng.normal(size=3) * 0.1
        _, xz = project(pose, point)
        if xz < 0.5:
            continue
        z, _ = project(pose, point)
        o = obs(z + rng.normal(size=2) * 0.01, velocity=rng.normal(size=2) * 0.5)
        td = rng.normal() * 0.02
        _, jac, valid = residual_world_point(o, td, pose, point)
        assert valid

        def res(pose_, point_, td_):
            r_, _, _ = residual_world_point(o, td_, pose_, point_)
            return r_

        fd_pose = np.zeros((2, 6))
        for i in range(6):
            d = np.zeros(6)
            d[i] = eps
            fd_pose[:, i] = (
                res(retract_pose(pose, d), point, td)
                - res(retract_pose(pose, -d), point, td)
            ) / (2 * eps)
        fd_point = np.zeros((2, 3))
        for i in range(3):
            d = np.zeros(3)
            d[i] = eps
            fd_point[:, i] = (res(pose, point + d, td) - res(pose, point - d, td)) / (
                2 * eps
            )
        fd_td = (res(pose, point, td + eps) - res(pose, point, td - eps)) / (2 * eps)

        scale = max(np.abs(jac["pose"]).max(), 1.0)
        assert np.abs(jac["pose"] - fd_pose).max() / scale < 1e-5
        scale = max(np.abs(jac["point"]).max(), 1.0)
        assert np.abs(jac["point"] - fd_point).max() / scale < 1e-5
        assert np.abs(jac["td"] - fd_td).max() / max(np.abs(fd_td).max(), 1.0) < 1e-5


def test_world_point_gauge_invariance():
    rng = np.random.default_rng(33)
    for _ in range(20):
        pose = random_pose(rng)
        point = pose.apply(np.array([0.1, 0.2, rng.uniform(2, 8)]))
        o = obs(rng.normal(size=2) * 0.1, velocity=rng.normal(size=2))
        td = 0.01
        r0, _, _ = residual_world_point(o, td, pose, point)
        g = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 10)
        r1, _, _ = residual_world_point(o, td, g * pose, g.apply(point))
        assert np.allclose(r0, r1, atol=1e-9)


# --------------------------------------------------------------------------
# inverse-depth two-view residual
# --------------------------------------------------------------------------

def two_view_setup(rng, depth=None):
    pose_i = random_pose(rng)
    pose_j = random_pose(rng)
    depth = depth if depth is not None else rng.uniform(3, 15)
    zi = rng.normal(size=2) * 0.3
    x_w = pose_i.apply(depth * np.array([zi[0], zi[1], 1.0]))
    zj, depth_j = project(pose_j, x_w)
    return pose_i, pose_j, depth, zi, zj, depth_j


def test_inverse_depth_consistent_zero_residual():
    rng = np.random.default_rng(34)
    for _ in range(50):
        pose_i, pose_j, depth, zi, zj, depth_j = two_view_setup(rng)
        if depth_j < 0.5:
            continue
        r, _, valid = residual_inverse_depth(
            obs(zi), obs(zj), 0.0, pose_i, pose_j, depth
        )
        assert valid
        assert np.linalg.norm(r) < 1e-12


def test_inverse_depth_zero_baseline_reduces_to_observation_difference():
    rng = np.random.default_rng(35)
    pose = random_pose(rng)
    zi = np.array([0.2, -0.1])
    zj = np.array([0.15, 0.05])
    for depth in (1.0, 5.0, 50.0):
        r, _, valid = residual_inverse_depth(
            obs(zi), obs(zj), 0.0, pose, pose, depth
        )
        assert valid
        assert np.allclose(r, zj - zi, atol=1e-12)


def test_inverse_depth_negative_depth_invalid():
    rng = np.random.default_rng(36)
    pose_i, pose_j, depth, zi, zj, _ = two_view_setup(rng)
    _, _, valid = residual_inverse_depth(obs(zi), obs(zj), 0.0, pose_i, pose_j, -1.0)
    assert not valid


def test_inverse_depth_jacobians_match_finite_differences():
    rng = np.random.default_rng(37)
    eps = 1e-6
    tested = 0
    while tested < 100:
        pose_i, pose_j, depth, zi, zj, depth_j = two_view_setup(rng)
        if depth_j < 1.0:
            continue
        oi = obs(zi + rng.normal(size=2) * 0.01, velocity=rng.normal(size=2) * 0.5)
        oj = obs(zj + rng.normal(size=2) * 0.01, velocity=rng.normal(size=2) * 0.5)
        td = rng.normal() * 0.02
        _, jac, valid = residual_inverse_depth(oi, oj, td, pose_i, pose_j, depth)
        if not valid:
            continue
        tested += 1

        def res(pi_, pj_, depth_, td_):
            r_, _, _ = residual_inverse_depth(oi, oj, td_, pi_, pj_, depth_)
            return r_

        for key, which in (("pose_i", 0), ("pose_j", 1)):
            fd = np.zeros((2, 6))
            for i in range(6):
                d = np.zeros(6)
                d[i] = eps
                if which == 0:
                    rp = res(retract_pose(pose_i, d), pose_j, depth, td)
                    rm = res(retract_pose(pose_i, -d), pose_j, depth, td)
                else:
                    rp = res(pose_i, retract_pose(pose_j, d), depth, td)
                    rm = res(pose_i, retract_pose(pose_j, -d), depth, td)
                fd[:, i] = (rp - rm) / (2 * eps)
            scale = max(np.abs(jac[key]).max(), 1.0)
            assert np.abs(jac[key] - fd).max() / scale < 1e-5

        fd_depth = (
            res(pose_i, pose_j, depth + eps, td) - res(pose_i, pose_j, depth - eps, td)
        ) / (2 * eps)
        scale = max(np.abs(jac["depth"]).max(), 1.0)
        assert np.abs(jac["depth"] - fd_depth).max() / scale < 1e-5

        fd_td = (
            res(pose_i, pose_j, depth, td + eps) - res(pose_i, pose_j, depth, td - eps)
        ) / (2 * eps)
        scale = max(np.abs(jac["td"]).max(), 1.0)
        assert np.abs(jac["td"] - fd_td).max() / scale < 1e-5


def test_inverse_depth_gauge_invariance():
    rng = np.random.default_rng(38)
    for _ in range(20):
        pose_i, pose_j, depth, zi, zj, depth_j = two_view_setup(rng)
        if depth_j < 0.5:
            continue
        oi = obs(zi, velocity=rng.normal(size=2))
        oj = obs(zj, velocity=rng.normal(size=2))
        r0, _, v0 = residual_inverse_depth(oi, oj, 0.013, pose_i, pose_j, depth)
        g = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 10)
        r1, _, v1 = residual_inverse_depth(oi, oj, 0.013, g * pose_i, g * pose_j, depth)
        if v0 and v1:
            assert np.allclose(r0, r1, atol=1e-9)


def test_inverse_depth_swap_symmetry_noise_free():
    rng = np.random.default_rng(39)
    for _ in range(20):
        pose_i, pose_j, depth, zi, zj, depth_j = two_view_setup(rng)
        if depth_j < 0.5:
            continue
        r_fwd, _, _ = residual_inverse_depth(obs(zi), obs(zj), 0.0, pose_i, pose_j, depth)
        r_bwd, _, _ = residual_inverse_depth(obs(zj), obs(zi), 0.0, pose_j, pose_i, depth_j)
        assert abs(np.linalg.norm(r_fwd) - np.linalg.norm(r_bwd)) < 1e-6


# --------------------------------------------------------------------------
# td = 0 reduces to the classical residuals, bitwise
# --------------------------------------------------------------------------

def test_td_zero_world_point_bitwise_classical():
    rng = np.random.default_rng(40)
    for _ in range(20):
        pose = random_pose(rng)
        point = pose.apply(np.array([0.4, -0.3, rng.uniform(2, 10)]))
        z = rng.normal(size=2) * 0.2
        huge_v = rng.normal(size=2) * 100.0
        r_td, _, _ = residual_world_point(obs(z, velocity=huge_v), 0.0, pose, point)
        r_plain, _, _ = residual_world_point(obs(z), 0.0, pose, point)
        assert np.array_equal(r_td, r_plain)
        # classical form computed independently, same operation order
        r_wc = pose.rotation.matrix()
        x_c = r_wc.T @ (np.asarray(point, dtype=float) - pose.translation)
        classical = np.asarray(z, float) - np.array([x_c[0] / x_c[2], x_c[1] / x_c[2]])
        assert np.array_equal(r_td, classical)


def test_td_zero_inverse_depth_bitwise_classical():
    rng = np.random.default_rng(41)
    for _ in range(20):
        pose_i, pose_j, depth, zi, zj, depth_j = two_view_setup(rng)
        if depth_j < 0.5:
            continue
        huge_vi = rng.normal(size=2) * 100.0
        huge_vj = rng.normal(size=2) * 100.0
        r_td, _, _ = residual_inverse_depth(
            obs(zi, velocity=huge_vi), obs(zj, velocity=huge_vj), 0.0,
            pose_i, pose_j, depth,
        )
        r_plain, _, _ = residual_inverse_depth(
            obs(zi), obs(zj), 0.0, pose_i, pose_j, depth
        )
        assert np.array_equal(r_td, r_plain)
        # classical two-view chain, same operation order
        r_i = pose_i.rotation.matrix()
        r_j = pose_j.rotation.matrix()
        h_i = np.array([zi[0], zi[1], 1.0])
        x_w = r_i @ (depth * h_i) + pose_i.translation
        x_j = r_j.T @ (x_w - pose_j.translation)
        classical = zj - np.array([x_j[0] / x_j[2], x_j[1] / x_j[2]])
        assert np.array_equal(r_td, classical)
