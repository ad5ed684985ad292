import numpy as np
import pytest

try:
    from threadpoolctl import threadpool_limits

    # the dense blocks here are ~150x150; BLAS thread spin costs more than it buys
    threadpool_limits(limits=1)
except ImportError:
    pass

from tcvio.estimator import EstimatorConfig, SlidingWindowEstimator
from tcvio.preintegration import ImuState
from tcvio.runner import feed_estimator
from tcvio.sim import SimConfig, simulate


def noiseless_sim(**kw):
    base = dict(pixel_noise_sigma=0.0, accel_noise_sigma=0.0, gyro_noise_sigma=0.0)
    base.update(kw)
    return SimConfig(**base)


def initial_state_for(data):
    t0 = float(np.clip(data.frames[0].t_stamped, 0.0, data.config.duration))
    kin = data.true_state(t0)
    return ImuState(kin.pose.translation, kin.velocity, kin.pose.rotation)


def run_estimator(sim_config, est_config=None, collect=False):
    """Simulate and feed; returns (estimator, data) or with estimates list."""
    data = simulate(sim_config)
    est_config = est_config or EstimatorConfig(camera=sim_config.camera)
    est = SlidingWindowEstimator(est_config, initial_state=initial_state_for(data))
    if not collect:
        feed_estimator(est, data.imu, data.frames)
        return est, data
    estimates = []
    imu_iter = iter(data.imu)
    pending = next(imu_iter, None)
    for frame in data.frames:
        t_used = frame.t_stamped + est.compensated_td
        while pending is not None and pending.t <= t_used + 0.02:
            est.process_imu(pending)
            pending = next(imu_iter, None)
        out = est.process_frame(frame)
        if out is not None:
            estimates.append(out)
    return est, data, estimates
