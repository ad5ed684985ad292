"""IMU preintegration between consecutive keyframes.

Accumulates bias-corrected samples with the midpoint rule into relative
motion deltas (delta_q, delta_v, delta_p), propagates a first-order
covariance, and tracks Jacobians of the deltas w.r.t. the linearization
biases so the optimizer can re-correct deltas without re-integrating.

Error-state/residual ordering is [rotation, velocity, position, b_a, b_g]
(15 dims). Gravity is excluded from the deltas and re-injected by the
residual/prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .se3 import (
    Rotation,
    right_jacobian_inv_so3,
    right_jacobian_so3,
    skew,
    so3_exp,
    so3_exp_matrix,
    so3_log,
)

log = logging.getLogger(__name__)

# Covariance floor for the bias random-walk blocks when the walk sigma is
# zero; keeps the factor information matrix invertible.
BIAS_WALK_COV_FLOOR = 1e-8


@dataclass
class ImuNoiseParams:
    gyro_sigma: float = 0.001        # rad/s, per sample
    accel_sigma: float = 0.01        # m/s^2, per sample
    gyro_walk_sigma: float = 0.0     # rad/s/sqrt(s)
    accel_walk_sigma: float = 0.0    # m/s^2/sqrt(s)

    def __post_init__(self):
        for name in ("gyro_sigma", "accel_sigma", "gyro_walk_sigma", "accel_walk_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class ImuState:
    p: np.ndarray
    v: np.ndarray
    q: Rotation
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "ImuState":
        return ImuState(
            self.p.copy(), self.v.copy(), Rotation.from_quat(self.q.q),
            self.b_a.copy(), self.b_g.copy(),
        )

    def retract(self, delta) -> "ImuState":
        """Apply a 15-dim tangent step [dp, dtheta, dv, dba, dbg]."""
        delta = np.asarray(delta, dtype=float)
        return ImuState(
            self.p + delta[0:3],
            self.v + delta[6:9],
            self.q * so3_exp(delta[3:6]),
            self.b_a + delta[9:12],
            self.b_g + delta[12:15],
        )

    def local_diff(self, other: "ImuState") -> np.ndarray:
        """Tangent of other relative to self: other = self.retract(result)."""
        return np.concatenate(
            [
                other.p - self.p,
                so3_log(self.q.inverse() * other.q),
                other.v - self.v,
                other.b_a - self.b_a,
                other.b_g - self.b_g,
            ]
        )


class PreintegratedImu:
    """Relative motion deltas with covariance and bias Jacobians.

    Attributes
    ----------
    delta_q, delta_v, delta_p : accumulated deltas (gravity-free, frame of
        the first sample's body).
    covariance : 15x15, ordered [theta, v, p, b_a, b_g].
    jac : 15x15 accumulated state-transition product; its upper-right 9x6
        block holds the delta-vs-bias Jacobians.
    bias_lin : (b_a, b_g) used during integration.
    """

    def __init__(self, bias_a, bias_g, noise: ImuNoiseParams):
        self.bias_a = np.asarray(bias_a, dtype=float).copy()
        self.bias_g = np.asarray(bias_g, dtype=float).copy()
        self.noise = noise
        self.dt_total = 0.0
        self.delta_q = Rotation.identity()
        self.delta_v = np.zeros(3)
        self.delta_p = np.zeros(3)
        self.covariance = np.zeros((15, 15))
        self.jac = np.eye(15)

    # -- accessors for the bias-Jacobian blocks ------------------------------
    @property
    def j_q_bg(self) -> np.ndarray:
        return self.jac[0:3, 12:15]

    @property
    def j_v_ba(self) -> np.ndarray:
        return self.jac[3:6, 9:12]

    @property
    def j_v_bg(self) -> np.ndarray:
        return self.jac[3:6, 12:15]

    @property
    def j_p_ba(self) -> np.ndarray:
        return self.jac[6:9, 9:12]

    @property
    def j_p_bg(self) -> np.ndarray:
        return self.jac[6:9, 12:15]

    def step(self, w0, a0, w1, a1, dt: float):
        """Advance by one midpoint step between two consecutive samples."""
        w0 = np.asarray(w0, dtype=float)
        a0 = np.asarray(a0, dtype=float)
        w1 = np.asarray(w1, dtype=float)
        a1 = np.asarray(a1, dtype=float)
        wm = 0.5 * (w0 + w1) - self.bias_g
        a0c = a0 - self.bias_a
        a1c = a1 - self.bias_a

        r0 = self.delta_q.matrix()
        dq = so3_exp(wm * dt)
        q1 = self.delta_q * dq
        r1 = q1.matrix()
        am = 0.5 * (r0 @ a0c + r1 @ a1c)

        # first-order error-state transition, order [theta, v, p, ba, bg]
        jr = right_jacobian_so3(wm * dt)
        f = np.eye(15)
        f[0:3, 0:3] = so3_exp_matrix(-wm * dt)
        f[0:3, 12:15] = -jr * dt
        s0 = r0 @ skew(a0c)
        s1 = r1 @ skew(a1c)
        f[3:6, 0:3] = -0.5 * dt * (s0 + s1 @ f[0:3, 0:3])
        f[3:6, 9:12] = -0.5 * dt * (r0 + r1)
        f[3:6, 12:15] = -0.5 * dt * s1 @ f[0:3, 12:15]
        f[6:9, 0:3] = 0.5 * dt * f[3:6, 0:3]
        f[6:9, 3:6] = np.eye(3) * dt
        f[6:9, 9:12] = 0.5 * dt * f[3:6, 9:12]
        f[6:9, 12:15] = 0.5 * dt * f[3:6, 12:15]

        # noise input, columns [ng0, na0, ng1, na1, nwa, nwg]
        g = np.zeros((15, 18))
        g[0:3, 0:3] = g[0:3, 6:9] = -0.5 * jr * dt
        g[3:6, 3:6] = -0.5 * dt * r0
        g[3:6, 9:12] = -0.5 * dt * r1
        g[3:6, 0:3] = g[3:6, 6:9] = -0.5 * dt * s1 @ (-0.5 * jr * dt)
        g[6:9, :] = 0.5 * dt * g[3:6, :]
        g[9:12, 12:15] = np.eye(3)
        g[12:15, 15:18] = np.eye(3)

        nz = self.noise
        q_diag = np.concatenate(
            [
                np.full(3, nz.gyro_sigma**2),
                np.full(3, nz.accel_sigma**2),
                np.full(3, nz.gyro_sigma**2),
                np.full(3, nz.accel_sigma**2),
                np.full(3, nz.accel_walk_sigma**2 * dt),
                np.full(3, nz.gyro_walk_sigma**2 * dt),
            ]
        )
        p_new = f @ self.covariance @ f.T + (g * q_diag) @ g.T
        self.covariance = 0.5 * (p_new + p_new.T)
        self.jac = f @ self.jac

        self.delta_p = self.delta_p + self.delta_v * dt + 0.5 * am * dt * dt
        self.delta_v = self.delta_v + am * dt
        self.delta_q = q1
        self.dt_total += dt

    def factor_covariance(self) -> np.ndarray:
        """Covariance with the bias random-walk floor applied."""
        cov = self.covariance.copy()
        for i in range(9, 15):
            if cov[i, i] < BIAS_WALK_COV_FLOOR:
                cov[i, i] = BIAS_WALK_COV_FLOOR
        return cov

    def corrected_deltas(self, bias_a, bias_g):
        """First-order delta update for a new bias pair; see correct_bias."""
        dba = np.asarray(bias_a, dtype=float) - self.bias_a
        dbg = np.asarray(bias_g, dtype=float) - self.bias_g
        mag = max(np.max(np.abs(dba), initial=0.0), np.max(np.abs(dbg), initial=0.0))
        if mag > 0.1:
            log.warning("bias correction %.3g exceeds first-order validity", mag)
        dq = self.delta_q * so3_exp(self.j_q_bg @ dbg)
        dv = self.delta_v + self.j_v_ba @ dba + self.j_v_bg @ dbg
        dp = self.delta_p + self.j_p_ba @ dba + self.j_p_bg @ dbg
        return dq, dv, dp

    def predict(self, state: ImuState, gravity=None) -> ImuState:
        """Propagate a state across this interval (biases carried over)."""
        if gravity is None:
            gravity = np.array([0.0, 0.0, -9.81])
        dq, dv, dp = self.corrected_deltas(state.b_a, state.b_g)
        r = state.q.matrix()
        dt = self.dt_total
        return ImuState(
            state.p + state.v * dt + 0.5 * gravity * dt * dt + r @ dp,
            state.v + gravity * dt + r @ dv,
            state.q * dq,
            state.b_a.copy(),
            state.b_g.copy(),
        )


def integrate(samples, bias_lin, noise: ImuNoiseParams) -> PreintegratedImu:
    """Preintegrate a time-ordered sample sequence (>= 2 samples).

    `samples` is a sequence of objects with .t, .gyro, .accel.
    `bias_lin` is the (b_a, b_g) pair held fixed during integration.
    Dispatches to the selected kernel backend (the pure-Python backend runs
    the step() chain below).
    """
    from . import _kernels

    if len(samples) < 2:
        raise ValueError("need at least 2 IMU samples to integrate")
    ts = np.array([s.t for s in samples], dtype=float)
    gyro = np.stack([np.asarray(s.gyro, dtype=float) for s in samples])
    accel = np.stack([np.asarray(s.accel, dtype=float) for s in samples])
    pre = PreintegratedImu(bias_lin[0], bias_lin[1], noise)
    q, dv, dp, cov, jac, dt_total = _kernels.preintegrate(
        ts, gyro, accel, pre.bias_a, pre.bias_g,
        noise.gyro_sigma, noise.accel_sigma,
        noise.accel_walk_sigma, noise.gyro_walk_sigma,
    )
    pre.delta_q = Rotation.from_quat(q)
    pre.delta_v = dv
    pre.delta_p = dp
    pre.covariance = cov
    pre.jac = jac
    pre.dt_total = dt_total
    return pre


def correct_bias(pre: PreintegratedImu, new_bias):
    """Deltas re-linearized at new_bias = (b_a, b_g) via stored Jacobians."""
    return pre.corrected_deltas(new_bias[0], new_bias[1])


def imu_residual(
    pre: PreintegratedImu,
    state_k: ImuState,
    state_k1: ImuState,
    gravity=None,
    with_jacobians: bool = True,
):
    """15-dim preintegration residual and its state Jacobians.

    Residual order: [theta, v, p, b_a, b_g]; the rotation block is the log of
    the quaternion mismatch. Jacobian columns follow the state tangent order
    [dp, dtheta, dv, dba, dbg] of each of the two states.
    """
    if pre.dt_total <= 0:
        raise ValueError("empty preintegration interval")
    if gravity is None:
        gravity = np.array([0.0, 0.0, -9.81])
    dt = pre.dt_total
    dq, dv, dp = pre.corrected_deltas(state_k.b_a, state_k.b_g)

    rk = state_k.q.matrix()
    rkt = rk.T
    q_rel = state_k.q.inverse() * state_k1.q
    r_theta = so3_log(dq.inverse() * q_rel)
    dv_world = state_k1.v - state_k.v - gravity * dt
    dp_world = state_k1.p - state_k.p - state_k.v * dt - 0.5 * gravity * dt * dt
    r_v = rkt @ dv_world - dv
    r_p = rkt @ dp_world - dp

    residual = np.concatenate(
        [r_theta, r_v, r_p, state_k1.b_a - state_k.b_a, state_k1.b_g - state_k.b_g]
    )
    if not with_jacobians:
        return residual, None, None

    jr_inv = right_jacobian_inv_so3(r_theta)
    exp_neg_r = so3_exp_matrix(-r_theta)
    m = rkt @ state_k1.q.matrix()  # R_k^T R_{k+1}
    # the bias correction applies Exp(j_q_bg db) on the right of delta_q;
    # away from db = 0 its derivative carries the correction's own J_r
    corr = pre.j_q_bg @ (state_k.b_g - pre.bias_g)

    jk = np.zeros((15, 15))
    jk1 = np.zeros((15, 15))
    # rotation residual
    jk[0:3, 3:6] = -jr_inv @ m.T
    jk[0:3, 12:15] = -jr_inv @ exp_neg_r @ right_jacobian_so3(corr) @ pre.j_q_bg
    jk1[0:3, 3:6] = jr_inv
    # velocity residual
    jk[3:6, 3:6] = skew(rkt @ dv_world)
    jk[3:6, 6:9] = -rkt
    jk[3:6, 9:12] = -pre.j_v_ba
    jk[3:6, 12:15] = -pre.j_v_bg
    jk1[3:6, 6:9] = rkt
    # position residual
    jk[6:9, 0:3] = -rkt
    jk[6:9, 3:6] = skew(rkt @ dp_world)
    jk[6:9, 6:9] = -rkt * dt
    jk[6:9, 9:12] = -pre.j_p_ba
    jk[6:9, 12:15] = -pre.j_p_bg
    jk1[6:9, 0:3] = rkt
    # bias consistency
    jk[9:12, 9:12] = -np.eye(3)
    jk[12:15, 12:15] = -np.eye(3)
    jk1[9:12, 9:12] = np.eye(3)
    jk1[12:15, 12:15] = np.eye(3)
    return residual, jk, jk1


def compose(first: PreintegratedImu, second: PreintegratedImu) -> tuple:
    """Deltas of the concatenated interval (consistency checks only)."""
    r1 = first.delta_q.matrix()
    dq = first.delta_q * second.delta_q
    dv = first.delta_v + r1 @ second.delta_v
    dp = first.delta_p + first.delta_v * second.dt_total + r1 @ second.delta_p
    return dq, dv, dp
