"""Sliding-window visual-inertial estimator with online time-offset calibration.

Each incoming camera frame is timestamped into the estimator's compensated
timeline (stamp + accumulated compensation). Keyframes carry IMU states;
consecutive keyframes are linked by preintegrated IMU factors; tracked
features contribute time-shifted reprojection factors whose observations
slide along their image-plane velocities with the remaining offset variable.
After every window optimization the estimated offset is folded into the
compensation and the variable resets, so the remaining offset converges to
zero while `compensated_td + td` stays the total calibrated offset.

Gauge freedom (global position and yaw) is fixed by the initial prior on the
first keyframe; marginalization transports it down the window.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels
from .camera import DEFAULT_CAMERA, CameraModel
from .preintegration import ImuNoiseParams, ImuState, imu_residual, integrate
from .se3 import Pose, Rotation, right_jacobian_inv_so3, so3_exp, so3_log
from .sim import FrameObservation, ImuSample
from .solver import (
    SolveOptions,
    SolveReport,
    SolverError,
    cholesky_solve,
    information_to_sqrt,
    lm_loop,
    marginal_covariance_from_hessian,
    schur_eliminate,
)
from .vision import MIN_INVERSE_DEPTH, ObservationWithVelocity

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
TD_UNOBSERVABLE_VARIANCE = 1e-2  # s^2


class EstimatorError(RuntimeError):
    pass


@dataclass
class EstimatorConfig:
    window_size: int = 10
    parallax_threshold_px: float = 10.0
    min_tracked_features: int = 20
    feature_mode: str = "inverse_depth"  # or "world_point"
    calibrate_time_offset: bool = True
    td_prior_sigma: float = 0.15         # seconds; keeps td conditioned pre-motion
    huber_delta: float = 1.0             # in whitened units, vision only
    pixel_noise_sigma: float = 0.5       # pixels
    camera: CameraModel = DEFAULT_CAMERA
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    max_solver_iterations: int = 6
    solver_gradient_tolerance: float = 1e-8
    solver_relative_cost_tolerance: float = 1e-6
    solver_step_tolerance: float = 1e-10
    # warm-started windows want near-Gauss-Newton steps from the start
    solver_initial_lambda: float = 1e-6
    min_triangulation_parallax: float = 1e-3
    min_feature_depth: float = 0.1
    # first-keyframe prior (gauge + conditioning)
    prior_position_sigma: float = 1e-4
    prior_yaw_sigma: float = 1e-4
    prior_rollpitch_sigma: float = 0.05
    prior_velocity_sigma: float = 0.1
    # biases are weakly excited inside one window and can masquerade as a
    # time offset; keep them on a leash at the scale of the sensor grade
    prior_accel_bias_sigma: float = 0.01
    prior_gyro_bias_sigma: float = 0.001

    def __post_init__(self):
        if self.feature_mode not in ("inverse_depth", "world_point"):
            raise ValueError(f"unknown feature_mode {self.feature_mode!r}")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")

    @property
    def parallax_threshold(self) -> float:
        return self.parallax_threshold_px / self.camera.mean_focal

    @property
    def vision_sqrt_weight(self) -> float:
        return self.camera.mean_focal / self.pixel_noise_sigma


class Keyframe:
    __slots__ = ("kf_id", "t", "state", "preint", "_sqrt_info")

    def __init__(self, kf_id, t, state, preint=None):
        self.kf_id = kf_id
        self.t = t
        self.state = state
        self.preint = preint
        self._sqrt_info = None

    def sqrt_info(self):
        """Whitening matrix L^-1 with L L^T = factor covariance."""
        if self._sqrt_info is None:
            cov = self.preint.factor_covariance()
            l = scipy.linalg.cholesky(cov, lower=True, check_finite=False)
            self._sqrt_info = scipy.linalg.solve_triangular(
                l, np.eye(15), lower=True, check_finite=False
            )
        return self._sqrt_info

    def invalidate(self):
        self._sqrt_info = None


class Track:
    __slots__ = ("feature_id", "obs", "inv_depth", "world_point")

    def __init__(self, feature_id):
        self.feature_id = feature_id
        self.obs = OrderedDict()  # kf_id -> ObservationWithVelocity
        self.inv_depth = None
        self.world_point = None

    @property
    def initialized(self):
        return self.inv_depth is not None or self.world_point is not None


class MarginalPrior:
    """Linearized Gaussian prior r(X) = r0 + J * stack(X [-] lin_point).

    Block keys are keyframe ids (15-dim tangent) plus "td" (1-dim). The
    information pair of the underlying quadratic is (H_p, e_p) with
    H_p = J^T J and e_p = J^T r0.
    """

    def __init__(self, keys, lin_points, sqrt_jac, r0):
        self.keys = list(keys)
        self.lin_points = dict(lin_points)
        self.sqrt_jac = sqrt_jac
        self.r0 = r0
        offsets = {}
        off = 0
        for k in keys:
            offsets[k] = off
            off += 1 if k == "td" else 15
        self.offsets = offsets
        self.dim = off

    def delta(self, states_by_key, td):
        d = np.zeros(self.dim)
        for k in self.keys:
            o = self.offsets[k]
            if k == "td":
                d[o] = td - self.lin_points[k]
            else:
                d[o : o + 15] = self.lin_points[k].local_diff(states_by_key[k])
        return d

    def residual(self, states_by_key, td):
        return self.r0 + self.sqrt_jac @ self.delta(states_by_key, td)

    def cost(self, states_by_key, td) -> float:
        r = self.residual(states_by_key, td)
        return 0.5 * float(r @ r)

    def tangent_jacobian(self, states_by_key):
        """J times d(delta)/d(local step); only rotation blocks differ from
        identity, by the inverse right Jacobian of the current mismatch."""
        j = self.sqrt_jac.copy()
        for k in self.keys:
            if k == "td":
                continue
            o = self.offsets[k]
            dtheta = so3_log(
                self.lin_points[k].q.inverse() * states_by_key[k].q
            )
            j[:, o + 3 : o + 6] = j[:, o + 3 : o + 6] @ right_jacobian_inv_so3(dtheta)
        return j

    @property
    def information(self):
        return self.sqrt_jac.T @ self.sqrt_jac


@dataclass
class WindowEstimate:
    t: float
    timestamps: list
    states: list
    td: float            # remaining-offset estimate from this optimization
    total_td: float      # compensated + td: the calibrated camera-IMU offset
    td_variance: float
    td_observable: bool
    features: dict
    report: SolveReport


class SlidingWindowEstimator:
    def __init__(self, config: EstimatorConfig = None, initial_state: ImuState = None):
        self.cfg = config or EstimatorConfig()
        self.gravity = GRAVITY.copy()
        self.initial_state = initial_state
        self.window: list = []
        self.tracks: dict = {}
        self.td = 0.0
        self.compensated_td = 0.0
        self.prior: MarginalPrior | None = None
        self.trajectory: list = []   # finalized (t, Pose) of marginalized keyframes
        self.trace: list = []        # per-optimization calibration records
        self._imu_t: list = []
        self._imu: list = []
        self._prev_obs: dict = {}    # feature_id -> (uv, t_used), previous frame
        self._prev2_obs: dict = {}   # feature_id -> (uv, t_used), frame before that
        self._last_frame_t = -math.inf
        self._kf_counter = 0

    # ------------------------------------------------------------------
    # data ingestion
    # ------------------------------------------------------------------
    def process_imu(self, sample: ImuSample):
        """Append one IMU sample; timestamps must be non-decreasing."""
        if self._imu_t and sample.t < self._imu_t[-1]:
            raise EstimatorError(
                f"IMU timestamp regression: {sample.t} < {self._imu_t[-1]}"
            )
        if self._imu_t and sample.t == self._imu_t[-1]:
            return  # duplicate stamp, keep the first
        self._imu_t.append(sample.t)
        self._imu.append(sample)

    def process_frame(self, frame: FrameObservation):
        """Ingest one camera frame; returns a WindowEstimate when the frame
        became a keyframe and the window was optimized."""
        t_used = frame.t_stamped + self.compensated_td
        if t_used <= self._last_frame_t:
            raise EstimatorError(
                f"frame timestamp not increasing: {t_used} <= {self._last_frame_t}"
            )
        self._last_frame_t = t_used

        obs = {}
        for fid, u, v in frame.observations:
            if frame.normalized:
                uv = np.array([u, v])
            else:
                uv = self.cfg.camera.normalize(np.array([u, v]))
            prev = self._prev_obs.get(fid)
            if prev is not None and t_used > prev[1]:
                vel = (uv - prev[0]) / (t_used - prev[1])
            else:
                vel = np.zeros(2)
            obs[fid] = ObservationWithVelocity(uv, vel, t_used, frame.frame_id, fid)
        self._revise_last_velocities(obs, t_used)

        is_keyframe = self.keyframe_decision(obs)
        self._prev2_obs = {
            fid: self._prev_obs[fid] for fid in obs if fid in self._prev_obs
        }
        self._prev_obs = {fid: (o.uv, t_used) for fid, o in obs.items()}
        if not is_keyframe:
            return None

        self._insert_keyframe(t_used, obs)
        if len(self.window) < 2:
            self._init_prior()
            return None

        self._update_feature_parameters()
        estimate = self.optimize_window()
        if len(self.window) > self.cfg.window_size:
            self.marginalize_oldest()
        self.compensate_time_offset()
        return estimate

    def _revise_last_velocities(self, obs, t_now):
        """Upgrade the newest keyframe's stored velocities to the central
        difference once the successor frame is available.

        A one-sided velocity shares its measurement noise with the residual
        of the same observation, which biases the offset estimate; the
        central difference has no such self-correlation.
        """
        if not self.window:
            return
        last = self.window[-1]
        for fid, o in obs.items():
            track = self.tracks.get(fid)
            if track is None:
                continue
            stored = track.obs.get(last.kf_id)
            if stored is None or stored.t >= t_now:
                continue
            prev2 = self._prev2_obs.get(fid)
            if prev2 is not None and prev2[1] < stored.t:
                stored.velocity = (o.uv - prev2[0]) / (t_now - prev2[1])
            # a track's first-ever observation keeps velocity zero

    def keyframe_decision(self, obs) -> bool:
        """Mean-parallax / track-count rule against the last keyframe."""
        if not self.window:
            return True
        last_id = self.window[-1].kf_id
        par = []
        for fid, o in obs.items():
            track = self.tracks.get(fid)
            if track is not None and last_id in track.obs:
                par.append(np.linalg.norm(o.uv - track.obs[last_id].uv))
        if len(par) < self.cfg.min_tracked_features:
            return True
        return float(np.mean(par)) > self.cfg.parallax_threshold

    # ------------------------------------------------------------------
    # window bookkeeping
    # ------------------------------------------------------------------
    def _insert_keyframe(self, t_used, obs):
        if not self.window:
            state = (
                self.initial_state.copy()
                if self.initial_state is not None
                else ImuState(np.zeros(3), np.zeros(3), Rotation.identity())
            )
            kf = Keyframe(self._kf_counter, t_used, state)
        else:
            last = self.window[-1]
            samples = self._imu_slice(last.t, t_used)
            pre = integrate(samples, (last.state.b_a, last.state.b_g), self.cfg.imu_noise)
            state = pre.predict(last.state, self.gravity)
            kf = Keyframe(self._kf_counter, t_used, state, pre)
        self._kf_counter += 1
        self.window.append(kf)
        for fid, o in obs.items():
            track = self.tracks.get(fid)
            if track is None:
                track = Track(fid)
                self.tracks[fid] = track
            track.obs[kf.kf_id] = o
        self._prune_imu_buffer()

    def _imu_slice(self, t_a, t_b):
        """Samples covering [t_a, t_b] with linearly interpolated endpoints."""
        if t_b <= t_a:
            raise EstimatorError(f"empty IMU interval [{t_a}, {t_b}]")
        if not self._imu:
            raise EstimatorError("no IMU data buffered")
        lo = bisect.bisect_right(self._imu_t, t_a)
        hi = bisect.bisect_left(self._imu_t, t_b)
        inner = self._imu[lo:hi]
        return (
            [self._interpolate(t_a, lo - 1)]
            + inner
            + [self._interpolate(t_b, hi - 1)]
        )

    def _interpolate(self, t, left_index):
        n = len(self._imu)
        i = min(max(left_index, 0), n - 1)
        s0 = self._imu[i]
        if s0.t == t:
            return s0
        if i + 1 >= n:
            if t - s0.t > 0.5:
                raise EstimatorError(f"IMU buffer ends {t - s0.t:.3f} s before {t}")
            return ImuSample(t, s0.gyro.copy(), s0.accel.copy())
        s1 = self._imu[i + 1]
        if t < s0.t:
            # frame precedes the whole buffer; hold the first sample
            return ImuSample(t, s0.gyro.copy(), s0.accel.copy())
        w = (t - s0.t) / (s1.t - s0.t)
        return ImuSample(
            t, (1 - w) * s0.gyro + w * s1.gyro, (1 - w) * s0.accel + w * s1.accel
        )

    def _prune_imu_buffer(self):
        if not self.window:
            return
        cutoff = self.window[0].t - 1.0
        drop = bisect.bisect_left(self._imu_t, cutoff)
        if drop > 0:
            del self._imu_t[:drop]
            del self._imu[:drop]

    # ------------------------------------------------------------------
    # feature initialization
    # ------------------------------------------------------------------
    def _window_obs(self, track):
        ids = [kf.kf_id for kf in self.window]
        return [(kid, track.obs[kid]) for kid in ids if kid in track.obs]

    def _update_feature_parameters(self):
        poses = {kf.kf_id: Pose(kf.state.q, kf.state.p) for kf in self.window}
        for fid in sorted(self.tracks):
            track = self.tracks[fid]
            if track.initialized:
                continue
            wobs = self._window_obs(track)
            if len(wobs) < 2:
                continue
            host_id, host_obs = wobs[0]
            # pair the host with the most separated other observation
            tgt_id, tgt_obs = max(
                wobs[1:], key=lambda e: np.linalg.norm(e[1].uv - host_obs.uv)
            )
            depth = self._triangulate(
                poses[host_id], poses[tgt_id], host_obs.uv, tgt_obs.uv
            )
            if depth is None:
                continue
            if self.cfg.feature_mode == "inverse_depth":
                track.inv_depth = 1.0 / depth
            else:
                h = np.array([host_obs.uv[0], host_obs.uv[1], 1.0])
                track.world_point = poses[host_id].apply(depth * h)

    def _triangulate(self, pose_h, pose_t, uv_h, uv_t):
        """Two-view depth in the host frame; None when parallax or depth is
        too small."""
        r_ht = pose_t.rotation.matrix().T @ pose_h.rotation.matrix()
        t_ht = pose_t.rotation.matrix().T @ (pose_h.translation - pose_t.translation)
        ray_h = r_ht @ np.array([uv_h[0], uv_h[1], 1.0])
        ray_t = np.array([uv_t[0], uv_t[1], 1.0])
        cross = np.cross(ray_t, ray_h)
        denom = np.linalg.norm(ray_t) * np.linalg.norm(ray_h)
        if np.linalg.norm(cross) / denom < self.cfg.min_triangulation_parallax:
            return None
        b = np.cross(ray_t, t_ht)
        a2 = float(cross @ cross)
        if a2 < 1e-18:
            return None
        depth = -float(cross @ b) / a2
        if depth < self.cfg.min_feature_depth:
            return None
        return depth

    # ------------------------------------------------------------------
    # optimization
    # ------------------------------------------------------------------
    def _active_features(self):
        feats = []
        for fid in sorted(self.tracks):
            track = self.tracks[fid]
            if not track.initialized:
                continue
            if len(self._window_obs(track)) >= 2:
                feats.append(track)
        return feats

    def _vision_arrays(self, feats):
        """Factor index arrays for the kernels, window-position indexed."""
        pos_of = {kf.kf_id: i for i, kf in enumerate(self.window)}
        if self.cfg.feature_mode == "inverse_depth":
            host, tgt, fidx = [], [], []
            z_i, v_i, z_j, v_j = [], [], [], []
            for fi, track in enumerate(feats):
                wobs = self._window_obs(track)
                hid, hobs = wobs[0]
                for tid, tobs in wobs[1:]:
                    host.append(pos_of[hid])
                    tgt.append(pos_of[tid])
                    fidx.append(fi)
                    z_i.append(hobs.uv)
                    v_i.append(hobs.velocity)
                    z_j.append(tobs.uv)
                    v_j.append(tobs.velocity)
            return dict(
                host=np.asarray(host, dtype=np.int64),
                tgt=np.asarray(tgt, dtype=np.int64),
                fidx=np.asarray(fidx, dtype=np.int64),
                z_i=np.asarray(z_i, dtype=float).reshape(-1, 2),
                v_i=np.asarray(v_i, dtype=float).reshape(-1, 2),
                z_j=np.asarray(z_j, dtype=float).reshape(-1, 2),
                v_j=np.asarray(v_j, dtype=float).reshape(-1, 2),
            )
        kf_arr, fidx = [], []
        z, v = [], []
        for fi, track in enumerate(feats):
            for kid, o in self._window_obs(track):
                kf_arr.append(pos_of[kid])
                fidx.append(fi)
                z.append(o.uv)
                v.append(o.velocity)
        return dict(
            kf=np.asarray(kf_arr, dtype=np.int64),
            fidx=np.asarray(fidx, dtype=np.int64),
            z=np.asarray(z, dtype=float).reshape(-1, 2),
            v=np.asarray(v, dtype=float).reshape(-1, 2),
        )

    @staticmethod
    def _pose_arrays(states):
        rot = np.stack([s.q.matrix() for s in states])
        pos = np.stack([s.p for s in states])
        return np.ascontiguousarray(rot), np.ascontiguousarray(pos)

    # The reprojection factor's shift parameter moves an observation forward
    # along its velocity (z + shift*V). A frame whose stamp trails the IMU
    # clock by the physical offset td (IMU time = stamp + td) holds content
    # from td seconds *after* the state, so the factor must be evaluated at
    # shift = -td; the td rows of the normal equations are negated back so
    # the optimizer state remains the physical offset of the stamp model.
    def _vision_accumulate(self, states, fparams, td, arrays, n_frames):
        rot, pos = self._pose_arrays(states)
        cfg = self.cfg
        if cfg.feature_mode == "inverse_depth":
            out = _kernels.accumulate_two_view(
                rot, pos, arrays["host"], arrays["tgt"], arrays["fidx"],
                arrays["z_i"], arrays["v_i"], arrays["z_j"], arrays["v_j"],
                fparams, -td, cfg.vision_sqrt_weight, cfg.huber_delta, n_frames,
            )
        else:
            out = _kernels.accumulate_world_point(
                rot, pos, arrays["kf"], arrays["fidx"], arrays["z"], arrays["v"],
                fparams, -td, cfg.vision_sqrt_weight, cfg.huber_delta, n_frames,
            )
        h_cc, g_c, h_ff, g_f, h_fc, cost, valid = out
        t = h_cc.shape[0] - 1
        h_cc[t, :t] = -h_cc[t, :t]
        h_cc[:t, t] = -h_cc[:t, t]
        g_c[t] = -g_c[t]
        h_fc[..., t] = -h_fc[..., t]
        return h_cc, g_c, h_ff, g_f, h_fc, cost, valid

    def _vision_cost(self, states, fparams, td, arrays):
        rot, pos = self._pose_arrays(states)
        cfg = self.cfg
        if cfg.feature_mode == "inverse_depth":
            cost, _ = _kernels.cost_two_view(
                rot, pos, arrays["host"], arrays["tgt"], arrays["fidx"],
                arrays["z_i"], arrays["v_i"], arrays["z_j"], arrays["v_j"],
                fparams, -td, cfg.vision_sqrt_weight, cfg.huber_delta,
            )
        else:
            cost, _ = _kernels.cost_world_point(
                rot, pos, arrays["kf"], arrays["fidx"], arrays["z"], arrays["v"],
                fparams, -td, cfg.vision_sqrt_weight, cfg.huber_delta,
            )
        return cost

    def _imu_prior_terms(self, states, td, d, with_jacobians):
        """Dense H/g contribution (camera columns only) of IMU factors and the
        marginal prior; returns (h, g, cost) with h/g None when not needed."""
        h = np.zeros((d, d)) if with_jacobians else None
        g = np.zeros(d) if with_jacobians else None
        cost = 0.0
        for i in range(1, len(self.window)):
            kf = self.window[i]
            if kf.preint is None:
                continue
            r, jk, jk1 = imu_residual(
                kf.preint, states[i - 1], states[i], self.gravity,
                with_jacobians=with_jacobians,
            )
            li = kf.sqrt_info()
            rw = li @ r
            cost += 0.5 * float(rw @ rw)
            if not with_jacobians:
                continue
            ja = li @ jk
            jb = li @ jk1
            sa = slice(15 * (i - 1), 15 * i)
            sb = slice(15 * i, 15 * (i + 1))
            h[sa, sa] += ja.T @ ja
            h[sb, sb] += jb.T @ jb
            h[sa, sb] += ja.T @ jb
            h[sb, sa] += jb.T @ ja
            g[sa] += ja.T @ rw
            g[sb] += jb.T @ rw
        if self.prior is not None:
            by_key = {kf.kf_id: states[i] for i, kf in enumerate(self.window)}
            r = self.prior.residual(by_key, td)
            cost += 0.5 * float(r @ r)
            if with_jacobians:
                jp = self.prior.tangent_jacobian(by_key)
                pos_of = {kf.kf_id: i for i, kf in enumerate(self.window)}
                cols = np.empty(self.prior.dim, dtype=np.intp)
                for key in self.prior.keys:
                    o = self.prior.offsets[key]
                    if key == "td":
                        cols[o] = d - 1
                    else:
                        cols[o : o + 15] = 15 * pos_of[key] + np.arange(15)
                h[np.ix_(cols, cols)] += jp.T @ jp
                g[cols] += jp.T @ r
        return h, g, cost

    def optimize_window(self) -> WindowEstimate:
        if len(self.window) < 2:
            raise EstimatorError("need at least 2 keyframes to optimize")
        cfg = self.cfg
        k = len(self.window)
        d = 15 * k + 1
        feats = self._active_features()
        arrays = self._vision_arrays(feats)
        have_vision = len(arrays["fidx"]) > 0
        feat_dim = 1 if cfg.feature_mode == "inverse_depth" else 3
        opt_td = cfg.calibrate_time_offset

        if cfg.feature_mode == "inverse_depth":
            fparams0 = np.array([t.inv_depth for t in feats], dtype=float)
        else:
            fparams0 = np.array([t.world_point for t in feats], dtype=float).reshape(
                -1, 3
            )

        def linearize(x):
            states, fparams, td = x
            if have_vision:
                h, g, hff, gf, hfc, vcost, _ = self._vision_accumulate(
                    states, fparams, td, arrays, k
                )
            else:
                h = np.zeros((d, d))
                g = np.zeros(d)
                hff = np.zeros((0,) if feat_dim == 1 else (0, 3, 3))
                gf = np.zeros((0,) if feat_dim == 1 else (0, 3))
                hfc = np.zeros((0, d) if feat_dim == 1 else (0, 3, d))
                vcost = 0.0
            hi, gi, icost = self._imu_prior_terms(states, td, d, True)
            h += hi
            g += gi
            cost = vcost + icost
            lin = {
                "h": h, "g_c": g, "hff": hff, "gf": gf, "hfc": hfc,
                "g": np.concatenate([g if opt_td else g[:-1], np.ravel(gf)]),
            }
            return lin, cost

        def solve_step(lin, lam):
            return self._schur_step(lin, lam, feat_dim, opt_td)

        def apply_step(x, step):
            states, fparams, td = x
            dc, df = step
            new_states = [
                s.retract(dc[15 * i : 15 * (i + 1)]) for i, s in enumerate(states)
            ]
            new_td = td + (dc[-1] if opt_td else 0.0)
            if feat_dim == 1:
                new_f = np.maximum(fparams + df, MIN_INVERSE_DEPTH)
            else:
                new_f = fparams + df.reshape(-1, 3)
            return new_states, new_f, new_td

        def eval_cost(x):
            states, fparams, td = x
            cost = self._vision_cost(states, fparams, td, arrays) if have_vision else 0.0
            _, _, ic = self._imu_prior_terms(states, td, d, False)
            return cost + ic

        x0 = ([kf.state for kf in self.window], fparams0, self.td)
        options = SolveOptions(
            max_iterations=cfg.max_solver_iterations,
            gradient_tolerance=cfg.solver_gradient_tolerance,
            relative_cost_tolerance=cfg.solver_relative_cost_tolerance,
            step_tolerance=cfg.solver_step_tolerance,
            initial_lambda=cfg.solver_initial_lambda,
        )
        x, report, lin = lm_loop(x0, linearize, solve_step, apply_step, eval_cost, options)
        states, fparams, td = x

        # write back
        for kf, s in zip(self.window, states):
            kf.state = s
        for track, p in zip(feats, fparams):
            if feat_dim == 1:
                track.inv_depth = float(p)
            else:
                track.world_point = np.asarray(p, dtype=float)
        self.td = float(td)

        td_variance, observable = self._td_variance_from_lin(lin, feat_dim)
        features = {
            t.feature_id: (1.0 / t.inv_depth if feat_dim == 1 else t.world_point.copy())
            for t in feats
        }
        estimate = WindowEstimate(
            t=self.window[-1].t,
            timestamps=[kf.t for kf in self.window],
            states=[kf.state.copy() for kf in self.window],
            td=self.td,
            total_td=self.compensated_td + self.td,
            td_variance=td_variance,
            td_observable=observable,
            features=features,
            report=report,
        )
        self.trace.append(
            dict(
                t=self.window[-1].t,
                td=self.td,
                total_td=estimate.total_td,
                td_variance=td_variance,
                cost=report.final_cost,
                iterations=report.iterations,
                n_features=len(feats),
                n_factors=int(len(arrays["fidx"])),
            )
        )
        return estimate

    def _schur_step(self, lin, lam, feat_dim, opt_td):
        h = lin["h"]
        g_c = lin["g_c"]
        hff, gf, hfc = lin["hff"], lin["gf"], lin["hfc"]
        d = h.shape[0]
        idx = np.arange(d if opt_td else d - 1)
        diag = np.diag(h)[idx].copy()
        diag[diag < 1e-12] = 1e-12
        hc = h[np.ix_(idx, idx)] + lam * np.diag(diag)
        gc = g_c[idx]
        nf = hff.shape[0]
        if nf:
            if feat_dim == 1:
                hf = hff * (1.0 + lam)
                hf = np.maximum(hf, 1e-12)
                hfc_r = hfc[:, idx]
                hred = hc - hfc_r.T @ (hfc_r / hf[:, None])
                gred = gc - hfc_r.T @ (gf / hf)
            else:
                dg = np.maximum(hff.diagonal(axis1=1, axis2=2), 1e-12)
                hf = hff + lam * np.einsum("fa,ab->fab", dg, np.eye(3))
                hf += 1e-12 * np.eye(3)[None, :, :]
                hfc_r = hfc[:, :, idx]
                sol_c = np.linalg.solve(hf, hfc_r)          # (F,3,Didx)
                sol_g = np.linalg.solve(hf, gf[:, :, None])[:, :, 0]
                hred = hc - np.einsum("fad,fae->de", hfc_r, sol_c)
                gred = gc - np.einsum("fad,fa->d", hfc_r, sol_g)
        else:
            hred, gred = hc, gc
        dc_sub = cholesky_solve(hred, -gred)
        dc = np.zeros(d)
        dc[idx] = dc_sub
        if nf:
            if feat_dim == 1:
                df = -(gf + hfc[:, idx] @ dc_sub) / hf
            else:
                rhs = gf + np.einsum("fad,d->fa", hfc[:, :, idx], dc_sub)
                df = -np.linalg.solve(hf, rhs[:, :, None])[:, :, 0]
                df = df.reshape(-1)
        else:
            df = np.zeros(0)
        return dc, df

    def _td_variance_from_lin(self, lin, feat_dim):
        """Marginal td variance from the final (undamped) linearization."""
        if not self.cfg.calibrate_time_offset:
            return self.cfg.td_prior_sigma**2, False
        h = lin["h"].copy()
        hff, hfc = lin["hff"], lin["hfc"]
        d = h.shape[0]
        if hff.shape[0]:
            if feat_dim == 1:
                hf = np.maximum(hff, 1e-12)
                h -= hfc.T @ (hfc / hf[:, None])
            else:
                sol = np.linalg.solve(hff + 1e-12 * np.eye(3)[None, :, :], hfc)
                h -= np.einsum("fad,fae->de", hfc, sol)
        try:
            var = float(marginal_covariance_from_hessian(h, [d - 1])[0, 0])
        except (np.linalg.LinAlgError, SolverError):
            var = self.cfg.td_prior_sigma**2
        var = max(var, 1e-18)
        return var, var < TD_UNOBSERVABLE_VARIANCE

    # ------------------------------------------------------------------
    # prior / marginalization
    # ------------------------------------------------------------------
    def _init_prior(self):
        cfg = self.cfg
        kf0 = self.window[0]
        rows = np.zeros((16, 16))
        r_wb = kf0.state.q.matrix()
        rows[0:3, 0:3] = np.eye(3) / cfg.prior_position_sigma
        w = np.diag(
            [
                1.0 / cfg.prior_rollpitch_sigma,
                1.0 / cfg.prior_rollpitch_sigma,
                1.0 / cfg.prior_yaw_sigma,
            ]
        )
        rows[3:6, 3:6] = w @ r_wb  # prior on world-axis rotation components
        rows[6:9, 6:9] = np.eye(3) / cfg.prior_velocity_sigma
        rows[9:12, 9:12] = np.eye(3) / cfg.prior_accel_bias_sigma
        rows[12:15, 12:15] = np.eye(3) / cfg.prior_gyro_bias_sigma
        rows[15, 15] = 1.0 / cfg.td_prior_sigma
        self.prior = MarginalPrior(
            [kf0.kf_id, "td"],
            {kf0.kf_id: kf0.state.copy(), "td": self.td},
            rows,
            np.zeros(16),
        )

    def marginalize_oldest(self):
        if len(self.window) < 2:
            raise EstimatorError("window too small to marginalize")
        old = self.window[0]
        nxt = self.window[1]

        # Only the prior and the departing IMU factor fold into the new
        # prior. Vision information stays in the live window: features
        # anchored at the departing keyframe re-anchor to their next
        # observation. Absorbing reprojection factors here couples the prior
        # to a timeline that later compensation steps keep shifting, which
        # systematically drags the offset estimate (measured at roughly a
        # microsecond per keyframe); the offset accuracy is the product here,
        # so the prior stays vision-free by design.
        # ---- block layout: dropped keyframe first, survivors, then td ----
        keep_kf_ids = [kf.kf_id for kf in self.window[1:]]
        drop_dim = 15
        dim = drop_dim + 15 * len(keep_kf_ids) + 1
        td_off = dim - 1

        def kf_offset(pos):  # window position -> marginalization column
            return 0 if pos == 0 else drop_dim + 15 * (pos - 1)

        states_by_key = {kf.kf_id: kf.state for kf in self.window}
        h = np.zeros((dim, dim))
        g = np.zeros(dim)

        # prior factor
        if self.prior is not None:
            r = self.prior.residual(states_by_key, self.td)
            jp = self.prior.tangent_jacobian(states_by_key)
            pos_of = {kf.kf_id: i for i, kf in enumerate(self.window)}
            cols = np.empty(self.prior.dim, dtype=np.intp)
            for key in self.prior.keys:
                o = self.prior.offsets[key]
                if key == "td":
                    cols[o] = td_off
                else:
                    cols[o : o + 15] = kf_offset(pos_of[key]) + np.arange(15)
            h[np.ix_(cols, cols)] += jp.T @ jp
            g[cols] += jp.T @ r

        # IMU factor old -> next
        if nxt.preint is not None:
            r, jk, jk1 = imu_residual(
                nxt.preint, old.state, nxt.state, self.gravity, with_jacobians=True
            )
            li = nxt.sqrt_info()
            rw = li @ r
            ja = li @ jk
            jb = li @ jk1
            ca = np.arange(0, 15)
            cb = kf_offset(1) + np.arange(15)
            h[np.ix_(ca, ca)] += ja.T @ ja
            h[np.ix_(cb, cb)] += jb.T @ jb
            h[np.ix_(ca, cb)] += ja.T @ jb
            h[np.ix_(cb, ca)] += jb.T @ ja
            g[ca] += ja.T @ rw
            g[cb] += jb.T @ rw

        keep_idx = np.arange(drop_dim, dim)
        drop_idx = np.arange(0, drop_dim)
        h_keep, g_keep = schur_eliminate(h, g, keep_idx, drop_idx)
        sqrt_jac, r0 = information_to_sqrt(h_keep, g_keep)

        keep_keys = keep_kf_ids + ["td"]
        lin_points = {kid: states_by_key[kid].copy() for kid in keep_kf_ids}
        lin_points["td"] = self.td
        self.prior = MarginalPrior(keep_keys, lin_points, sqrt_jac, r0)

        # ---- shrink the window ----
        poses = {kf.kf_id: Pose(kf.state.q, kf.state.p) for kf in self.window}
        self.trajectory.append((old.t, Pose(old.state.q, old.state.p)))
        self.window.pop(0)
        self.window[0].preint = None  # factor to the removed keyframe
        self.window[0].invalidate()
        self._reanchor_tracks(old.kf_id, poses)
        self._prune_imu_buffer()

    def _reanchor_tracks(self, old_id, poses):
        """Drop observations at the departing keyframe; transform inverse
        depths anchored there to the next observing keyframe."""
        window_ids = {kf.kf_id for kf in self.window}
        dead = []
        for fid, track in self.tracks.items():
            if old_id not in track.obs:
                if not any(k in window_ids for k in track.obs):
                    dead.append(fid)
                continue
            hosted = next(iter(track.obs)) == old_id
            old_obs = track.obs.pop(old_id)
            remaining = [k for k in track.obs if k in window_ids]
            if not remaining:
                dead.append(fid)
                continue
            if hosted and track.inv_depth is not None:
                new_host = remaining[0]
                h = np.array([old_obs.uv[0], old_obs.uv[1], 1.0])
                x_w = poses[old_id].apply(h / track.inv_depth)
                x_n = poses[new_host].inverse().apply(x_w)
                if x_n[2] > self.cfg.min_feature_depth:
                    track.inv_depth = 1.0 / x_n[2]
                else:
                    track.inv_depth = None
        for fid in dead:
            del self.tracks[fid]

    # ------------------------------------------------------------------
    # compensation
    # ------------------------------------------------------------------
    def compensate_time_offset(self):
        """Fold the current offset estimate into the compensated timeline.

        Every stored camera timestamp shifts by the newly compensated amount,
        so each keyframe now refers to an instant dtd later on the IMU clock;
        states and prior linearization points are advanced along the measured
        IMU trajectory to stay attached to their instants.
        """
        if not self.cfg.calibrate_time_offset:
            return
        dtd = self.td
        if abs(dtd) < 1e-12:
            return
        self.compensated_td += dtd
        self.td = 0.0
        increments = {}
        for kf in self.window:
            new_state = self._advance_state(kf.state, kf.t, dtd)
            increments[kf.kf_id] = kf.state.local_diff(new_state)
            kf.state = new_state
            kf.t += dtd
        self._last_frame_t += dtd
        self._prev_obs = {
            fid: (uv, t + dtd) for fid, (uv, t) in self._prev_obs.items()
        }
        self._prev2_obs = {
            fid: (uv, t + dtd) for fid, (uv, t) in self._prev2_obs.items()
        }
        for track in self.tracks.values():
            for o in track.obs.values():
                o.t += dtd
        if self.prior is not None:
            # linearization points ride along by the same local increment as
            # their window states, preserving the prior residual
            for key in self.prior.keys:
                if key == "td" or key not in increments:
                    continue
                self.prior.lin_points[key] = self.prior.lin_points[key].retract(
                    increments[key]
                )
        self._reset_prior_td()
        # re-integrate over the shifted keyframe intervals; sub-0.1us shifts
        # are far below the IMU resolution and are skipped
        if abs(dtd) < 1e-7:
            return
        for i in range(1, len(self.window)):
            prev, kf = self.window[i - 1], self.window[i]
            if kf.preint is None:
                continue
            samples = self._imu_slice(prev.t, kf.t)
            kf.preint = integrate(
                samples, (prev.state.b_a, prev.state.b_g), self.cfg.imu_noise
            )
            kf.invalidate()

    def _advance_state(self, state: ImuState, t: float, dtd: float):
        """Single midpoint step of length dtd along the measured IMU signal."""
        if abs(dtd) < 1e-9:
            return state
        mid = self._imu_interp(t + 0.5 * dtd)
        w = mid.gyro - state.b_g
        a = mid.accel - state.b_a
        q_mid = state.q * so3_exp(w * (0.5 * dtd))
        a_world = q_mid.matrix() @ a + self.gravity
        return ImuState(
            state.p + state.v * dtd + 0.5 * a_world * dtd * dtd,
            state.v + a_world * dtd,
            state.q * so3_exp(w * dtd),
            state.b_a.copy(),
            state.b_g.copy(),
        )

    def _imu_interp(self, t):
        i = bisect.bisect_right(self._imu_t, t) - 1
        return self._interpolate(t, i)

    def _reset_prior_td(self):
        """Marginalize td out of the prior and re-seed it with the fresh
        weak prior around the reset value.

        Window observations get folded into the prior many times as their
        host keyframe slides (the standard reuse approximation), which
        inflates transported td information until the remaining-offset
        variable freezes; each compensation therefore restarts the offset
        estimate from the window evidence alone.
        """
        prior = self.prior
        if prior is None or "td" not in prior.keys:
            return
        td_off = prior.offsets["td"]
        h = prior.information
        g = prior.sqrt_jac.T @ prior.r0
        keep = np.array([i for i in range(prior.dim) if i != td_off])
        if len(keep):
            h_keep, g_keep = schur_eliminate(h, g, keep, np.array([td_off]))
        else:
            h_keep, g_keep = np.zeros((0, 0)), np.zeros(0)
        state_keys = [k for k in prior.keys if k != "td"]
        dim = len(keep) + 1
        h_new = np.zeros((dim, dim))
        g_new = np.zeros(dim)
        h_new[:-1, :-1] = h_keep
        g_new[:-1] = g_keep
        h_new[-1, -1] = 1.0 / self.cfg.td_prior_sigma**2
        sqrt_jac, r0 = information_to_sqrt(h_new, g_new)
        lin = {k: prior.lin_points[k] for k in state_keys}
        lin["td"] = 0.0
        self.prior = MarginalPrior(state_keys + ["td"], lin, sqrt_jac, r0)

    # ------------------------------------------------------------------
    # outputs
    # ------------------------------------------------------------------
    @property
    def total_td(self) -> float:
        return self.compensated_td + self.td

    def trajectory_poses(self):
        """Finalized poses plus the current window, time-ordered."""
        out = list(self.trajectory)
        out.extend((kf.t, Pose(kf.state.q, kf.state.p)) for kf in self.window)
        return out
