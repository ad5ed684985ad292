import numpy as np
import pytest

from tcvio import data_io
from tcvio.camera import CameraModel
from tcvio.data_io import ConfigError, DataFormatError
from tcvio.metrics import TrajectoryRecord, ate_rmse
from tcvio.se3 import Pose, Rotation, so3_exp
from tcvio.sim import FrameObservation, ImuSample

CAM = CameraModel(fx=460.0, fy=460.0, cx=320.0, cy=240.0, width=640, height=480)


# --------------------------------------------------------------------------
# IMU CSV
# --------------------------------------------------------------------------

def test_read_imu_row_mapping(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("1403636580838555648,0.1,0.0,0.0,0.0,0.0,9.81\n")
    samples = data_io.read_imu_csv(p)
    assert len(samples) == 1
    s = samples[0]
    assert np.allclose(s.gyro, [0.1, 0.0, 0.0])
    assert np.allclose(s.accel, [0.0, 0.0, 9.81])
    assert s.t == pytest.approx(1403636580.838555648, abs=1e-6)
    assert s.t_ns == 1403636580838555648


def test_read_imu_empty_file(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("")
    assert data_io.read_imu_csv(p) == []


def test_imu_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(80)
    samples = [
        ImuSample(k * 0.005, rng.normal(size=3), rng.normal(size=3))
        for k in range(50)
    ]
    p = tmp_path / "imu.csv"
    data_io.write_imu_csv(p, samples)
    back = data_io.read_imu_csv(p)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert abs(a.t - b.t) < 1e-9
        assert np.allclose(a.gyro, b.gyro, atol=1e-9)
        assert np.allclose(a.accel, b.accel, atol=1e-9)
    # file -> memory -> file keeps exact nanosecond stamps
    p2 = tmp_path / "imu2.csv"
    data_io.write_imu_csv(p2, back)
    again = data_io.read_imu_csv(p2)
    for a, b in zip(back, again):
        assert a.t_ns == b.t_ns


def test_imu_malformed_row_has_line_number(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("100,0,0,0,0,0,9.81\n200,bad,0,0,0,0,9.81\n")
    with pytest.raises(DataFormatError, match=":2:"):
        data_io.read_imu_csv(p)


def test_imu_non_monotone_rejected(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("200,0,0,0,0,0,9.81\n100,0,0,0,0,0,9.81\n")
    with pytest.raises(DataFormatError, match="not increasing"):
        data_io.read_imu_csv(p)


# --------------------------------------------------------------------------
# feature tracks
# --------------------------------------------------------------------------

def test_feature_normalization():
    rows = [
        f"0,100000000,7,{CAM.cx},{CAM.cy}",
        f"0,100000000,8,{CAM.cx + CAM.fx},{CAM.cy}",
    ]
    import io as _io

    def parse(text, tmp):
        p = tmp / "ft.csv"
        p.write_text(text)
        return data_io.read_feature_tracks(p, CAM)

    import tempfile, pathlib

    with tempfile.TemporaryDirectory() as d:
        frames = parse("\n".join(rows) + "\n", pathlib.Path(d))
    assert len(frames) == 1
    obs = dict((fid, (x, y)) for fid, x, y in frames[0].observations)
    assert obs[7] == pytest.approx((0.0, 0.0))
    assert obs[8][0] == pytest.approx(1.0)
    assert frames[0].normalized


def test_feature_roundtrip(tmp_path):
    rng = np.random.default_rng(81)
    frames = []
    for k in range(5):
        obs = [
            (int(fid), float(rng.uniform(0, 640)), float(rng.uniform(0, 480)))
            for fid in rng.choice(100, size=8, replace=False)
        ]
        frames.append(FrameObservation(0.1 * k, k, obs))
    p = tmp_path / "ft.csv"
    data_io.write_feature_tracks(p, frames)
    back = data_io.read_feature_tracks(p, CAM)
    assert len(back) == len(frames)
    for a, b in zip(frames, back):
        assert abs(a.t_stamped - b.t_stamped) < 1e-9
        assert b.normalized
        for (fa, ua, va), (fb, xb, yb) in zip(a.observations, b.observations):
            assert fa == fb
            uv = CAM.denormalize(np.array([xb, yb]))
            assert abs(uv[0] - ua) < 1e-9
            assert abs(uv[1] - va) < 1e-9


def test_feature_duplicate_rejected(tmp_path):
    p = tmp_path / "ft.csv"
    p.write_text("0,100,5,10,10\n0,100,5,11,11\n")
    with pytest.raises(DataFormatError, match="duplicate"):
        data_io.read_feature_tracks(p, CAM)


def test_feature_frame_order_rejected(tmp_path):
    p = tmp_path / "ft.csv"
    p.write_text("1,200,5,10,10\n0,100,6,10,10\n")
    with pytest.raises(DataFormatError, match="not increasing"):
        data_io.read_feature_tracks(p, CAM)


def test_feature_non_contiguous_frame_rejected(tmp_path):
    p = tmp_path / "ft.csv"
    p.write_text("0,100,5,10,10\n1,200,5,10,10\n0,300,6,10,10\n")
    with pytest.raises(DataFormatError, match="contiguous|not increasing"):
        data_io.read_feature_tracks(p, CAM)


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

def test_tum_identity_line(tmp_path):
    p = tmp_path / "traj.txt"
    data_io.write_trajectory_tum(p, [(1.0, Pose.identity())])
    assert p.read_text() == "1.000000000 0 0 0 0 0 0 1\n"


def test_tum_roundtrip_through_metrics(tmp_path):
    rng = np.random.default_rng(82)
    records = []
    for k in range(30):
        records.append(
            (
                0.1 * k,
                Pose(so3_exp(rng.normal(size=3) * 0.4), rng.normal(size=3) * 4),
            )
        )
    p = tmp_path / "traj.txt"
    data_io.write_trajectory_tum(p, records)
    times, poses = data_io.read_trajectory_tum(p)
    rec_a = TrajectoryRecord(np.array([t for t, _ in records]), [q for _, q in records])
    rec_b = TrajectoryRecord(np.array(times), poses)
    assert ate_rmse(rec_b, rec_a) < 1e-7
    for (ta, pa), tb, pb in zip(records, times, poses):
        assert abs(ta - tb) < 1e-9
        assert abs(abs(float(pa.rotation.q @ pb.rotation.q)) - 1.0) < 1e-9


def test_tum_malformed_rejected(tmp_path):
    p = tmp_path / "traj.txt"
    p.write_text("1.0 0 0 0 0 0 1\n")
    with pytest.raises(DataFormatError, match=":1:"):
        data_io.read_trajectory_tum(p)


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

GOOD_CONFIG = """
mode: simulate
seed: 3
output_dir: out
simulation:
  duration: 10.0
  injected_td: 0.005
estimator:
  window_size: 8
  pixel_noise_sigma: 0.5
"""


def test_config_parses(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(GOOD_CONFIG)
    cfg = data_io.load_config(p)
    assert cfg.mode == "simulate"
    assert cfg.sim.duration == 10.0
    assert cfg.sim.injected_td == 0.005
    assert cfg.sim.rng_seed == 3
    assert cfg.estimator.window_size == 8


def test_config_unknown_key_rejected(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(GOOD_CONFIG + "\nestimator_typo: {}\n")
    with pytest.raises(ConfigError, match="estimator_typo"):
        data_io.load_config(p)


def test_config_nested_unknown_key_rejected(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(
        "mode: simulate\nsimulation:\n  duration: 5.0\n  pixel_sigma_typo: 1\n"
    )
    with pytest.raises(ConfigError, match="pixel_sigma_typo"):
        data_io.load_config(p)


def test_config_requires_mode(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("output_dir: out\n")
    with pytest.raises(ConfigError, match="mode"):
        data_io.load_config(p)


def test_config_replay_requires_paths(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("mode: replay\nreplay:\n  imu_csv: a.csv\n")
    with pytest.raises(ConfigError, match="features_csv"):
        data_io.load_config(p)


def test_config_rejects_nonpositive_sigma(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(
        "mode: simulate\nsimulation: {duration: 1.0}\n"
        "estimator: {pixel_noise_sigma: 0.0}\n"
    )
    with pytest.raises(ConfigError, match="pixel_noise_sigma"):
        data_io.load_config(p)
