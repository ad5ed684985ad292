import math

import numpy as np
import pytest

from tcvio.preintegration import (
    ImuNoiseParams,
    ImuState,
    compose,
    correct_bias,
    imu_residual,
    integrate,
)
from tcvio.se3 import Rotation, so3_exp, so3_log
from tcvio.sim import ImuSample

NO_NOISE = ImuNoiseParams(0.0, 0.0, 0.0, 0.0)
ZERO_BIAS = (np.zeros(3), np.zeros(3))


def constant_signal(gyro, accel, duration, rate=100.0):
    n = int(round(duration * rate)) + 1
    return [
        ImuSample(i / rate, np.asarray(gyro, float), np.asarray(accel, float))
        for i in range(n)
    ]


def random_signal(rng, n=6, rate=100.0, gyro_scale=1.0, accel_scale=3.0):
    return [
        ImuSample(
            i / rate,
            rng.normal(scale=gyro_scale, size=3),
            rng.normal(scale=accel_scale, size=3),
        )
        for i in range(n)
    ]


def random_state(rng):
    return ImuState(
        rng.normal(size=3) * 2,
        rng.normal(size=3),
        so3_exp(rng.normal(size=3)),
        rng.normal(size=3) * 0.05,
        rng.normal(size=3) * 0.005,
    )


# --------------------------------------------------------------------------
# integrate
# --------------------------------------------------------------------------

def test_zero_input_gives_identity_deltas():
    pre = integrate(constant_signal([0, 0, 0], [0, 0, 0], 1.0), ZERO_BIAS, NO_NOISE)
    assert np.allclose(pre.delta_q.q, [1, 0, 0, 0])
    assert np.allclose(pre.delta_v, 0.0)
    assert np.allclose(pre.delta_p, 0.0)
    assert pre.dt_total == pytest.approx(1.0, abs=1e-12)


def test_constant_gyro_closed_form():
    pre = integrate(constant_signal([0, 0, 0.5], [0, 0, 0], 2.0), ZERO_BIAS, NO_NOISE)
    expected = so3_exp([0, 0, 1.0])
    err = np.linalg.norm(so3_log(pre.delta_q.inverse() * expected))
    assert err < 1e-6


def test_constant_accel_kinematics():
    pre = integrate(constant_signal([0, 0, 0], [1, 0, 0], 2.0), ZERO_BIAS, NO_NOISE)
    assert np.allclose(pre.delta_v, [2.0, 0, 0], atol=1e-9)
    assert np.allclose(pre.delta_p, [2.0, 0, 0], atol=1e-9)


def test_integrate_rejects_bad_input():
    samples = constant_signal([0, 0, 0], [0, 0, 0], 0.1)
    with pytest.raises(ValueError):
        integrate(samples[:1], ZERO_BIAS, NO_NOISE)
    shuffled = [samples[0], samples[2], samples[1]]
    with pytest.raises(ValueError):
        integrate(shuffled, ZERO_BIAS, NO_NOISE)


def test_covariance_psd_during_noisy_integration():
    rng = np.random.default_rng(21)
    noise = ImuNoiseParams(0.001, 0.01, 1e-5, 1e-4)
    pre = None
    samples = random_signal(rng, n=200)
    import tcvio.preintegration as pi

    pre = pi.PreintegratedImu(np.zeros(3), np.zeros(3), noise)
    for s0, s1 in zip(samples[:-1], samples[1:]):
        pre.step(s0.gyro, s0.accel, s1.gyro, s1.accel, s1.t - s0.t)
        assert np.linalg.eigvalsh(pre.covariance).min() >= -1e-12


def test_split_compose_consistency():
    rng = np.random.default_rng(22)
    for _ in range(20):
        samples = random_signal(rng, n=11)
        split = rng.integers(1, 10)
        full = integrate(samples, ZERO_BIAS, NO_NOISE)
        first = integrate(samples[: split + 1], ZERO_BIAS, NO_NOISE)
        second = integrate(samples[split:], ZERO_BIAS, NO_NOISE)
        dq, dv, dp = compose(first, second)
        assert np.linalg.norm(so3_log(dq.inverse() * full.delta_q)) < 1e-9
        assert np.allclose(dv, full.delta_v, atol=1e-9)
        assert np.allclose(dp, full.delta_p, atol=1e-9)


# --------------------------------------------------------------------------
# correct_bias
# --------------------------------------------------------------------------

def test_bias_correction_noop_at_linearization_point():
    rng = np.random.default_rng(23)
    samples = random_signal(rng)
    bias = (rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.001)
    pre = integrate(samples, bias, NO_NOISE)
    dq, dv, dp = correct_bias(pre, bias)
    assert np.array_equal(dv, pre.delta_v)
    assert np.array_equal(dp, pre.delta_p)
    assert np.linalg.norm(so3_log(dq.inverse() * pre.delta_q)) < 1e-15


def test_bias_correction_matches_reintegration_gyro():
    rng = np.random.default_rng(24)
    samples = random_signal(rng, n=101)  # 1 s
    pre = integrate(samples, ZERO_BIAS, NO_NOISE)
    db_g = np.array([1e-4, -0.5e-4, 0.3e-4])
    dq, _, _ = correct_bias(pre, (np.zeros(3), db_g))
    re = integrate(samples, (np.zeros(3), db_g), NO_NOISE)
    err = np.linalg.norm(so3_log(dq.inverse() * re.delta_q))
    assert err < 1e-7


def test_bias_correction_matches_reintegration_accel():
    rng = np.random.default_rng(25)
    samples = random_signal(rng, n=11)  # 0.1 s
    pre = integrate(samples, ZERO_BIAS, NO_NOISE)
    db_a = np.array([1e-3, 0.0, -1e-3])
    _, dv, dp = correct_bias(pre, (db_a, np.zeros(3)))
    re = integrate(samples, (db_a, np.zeros(3)), NO_NOISE)
    assert np.linalg.norm(dp - re.delta_p) < 1e-8
    assert np.linalg.norm(dv - re.delta_v) < 1e-8


# --------------------------------------------------------------------------
# residual
# --------------------------------------------------------------------------

def consistent_pair(rng, n=11):
    """A state pair exactly consistent with a zero-noise integration."""
    samples = random_signal(rng, n=n)
    state_k = random_state(rng)
    pre = integrate(samples, (state_k.b_a, state_k.b_g), NO_NOISE)
    state_k1 = pre.predict(state_k)
    return pre, state_k, state_k1


def test_residual_zero_for_consistent_states():
    rng = np.random.default_rng(26)
    for _ in range(10):
        pre, sk, sk1 = consistent_pair(rng)
        r, _, _ = imu_residual(pre, sk, sk1)
        assert np.linalg.norm(r) < 1e-9


def test_residual_position_block_direction():
    rng = np.random.default_rng(27)
    pre, sk, sk1 = consistent_pair(rng)
    moved = sk1.copy()
    moved.p = moved.p + np.array([0.1, 0.0, 0.0])
    r, _, _ = imu_residual(pre, sk, moved)
    expected = sk.q.matrix().T @ np.array([0.1, 0.0, 0.0])
    assert np.allclose(r[6:9], expected, atol=1e-9)
    assert np.linalg.norm(r[0:6]) < 1e-9


def fd_jacobians(pre, sk, sk1, eps=1e-6):
    jk = np.zeros((15, 15))
    jk1 = np.zeros((15, 15))
    for i in range(15):
        d = np.zeros(15)
        d[i] = eps
        rp, _, _ = imu_residual(pre, sk.retract(d), sk1, with_jacobians=False)
        rm, _, _ = imu_residual(pre, sk.retract(-d), sk1, with_jacobians=False)
        jk[:, i] = (rp - rm) / (2 * eps)
        rp, _, _ = imu_residual(pre, sk, sk1.retract(d), with_jacobians=False)
        rm, _, _ = imu_residual(pre, sk, sk1.retract(-d), with_jacobians=False)
        jk1[:, i] = (rp - rm) / (2 * eps)
    return jk, jk1


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1.0)
    return np.abs(a - b).max() / scale


def test_residual_jacobians_match_finite_differences():
    rng = np.random.default_rng(28)
    for _ in range(100):
        pre, sk, sk1 = consistent_pair(rng, n=5)
        # evaluate away from the zero-residual point and off the bias
        # linearization so the correction chain is exercised
        sk = sk.retract(rng.normal(size=15) * 0.01)
        sk1 = sk1.retract(rng.normal(size=15) * 0.05)
        r, jk, jk1 = imu_residual(pre, sk, sk1)
        fk, fk1 = fd_jacobians(pre, sk, sk1)
        assert rel_err(jk, fk) < 1e-5
        assert rel_err(jk1, fk1) < 1e-5


def test_residual_bias_jacobian_matches_prediction():
    rng = np.random.default_rng(29)
    pre, sk, sk1 = consistent_pair(rng)
    db = 1e-4
    perturbed = sk.copy()
    perturbed.b_g = perturbed.b_g + np.array([db, 0, 0])
    r1, _, _ = imu_residual(pre, perturbed, sk1)
    r0, jk, _ = imu_residual(pre, sk, sk1)
    predicted = jk[:, 12] * db
    assert np.allclose(r1 - r0, predicted, atol=1e-8)


def test_factor_covariance_floors_bias_blocks():
    pre = integrate(constant_signal([0, 0, 0], [0, 0, 0], 0.1), ZERO_BIAS, NO_NOISE)
    cov = pre.factor_covariance()
    assert np.all(np.diag(cov)[9:15] >= 1e-8)
    assert np.isfinite(np.linalg.cholesky(cov + np.eye(15) * 1e-16)).all()
