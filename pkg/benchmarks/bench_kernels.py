#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Covers the two hot paths: batched two-view factor accumulation (the inner
loop of every window iteration) and IMU preintegration (re-run on every
compensation). Verifies both backends agree before timing.

Usage: python benchmarks/bench_kernels.py [--factors N] [--repeats N]
"""

import argparse
import time

import numpy as np

try:
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=1)
except ImportError:
    pass

from tcvio._kernels import _pycore
from tcvio.se3 import so3_exp

try:
    from tcvio._kernels import _fastcore
except ImportError:
    _fastcore = None


def window_problem(rng, n_frames, n_feat, n_factors):
    rot = np.stack(
        [so3_exp(rng.normal(size=3) * 0.4).matrix() for _ in range(n_frames)]
    )
    pos = rng.normal(size=(n_frames, 3)) * 2.0
    host = rng.integers(0, n_frames, n_factors)
    tgt = (host + rng.integers(1, n_frames, n_factors)) % n_frames
    return dict(
        rot=np.ascontiguousarray(rot),
        pos=np.ascontiguousarray(pos),
        host=host.astype(np.int64),
        tgt=tgt.astype(np.int64),
        fidx=rng.integers(0, n_feat, n_factors).astype(np.int64),
        z_i=rng.normal(size=(n_factors, 2)) * 0.3,
        v_i=rng.normal(size=(n_factors, 2)) * 0.5,
        z_j=rng.normal(size=(n_factors, 2)) * 0.3,
        v_j=rng.normal(size=(n_factors, 2)) * 0.5,
        inv_depth=rng.uniform(0.05, 0.3, n_feat),
    )


def imu_problem(rng, n_samples):
    ts = np.arange(n_samples) * 0.01
    return (
        ts,
        rng.normal(size=(n_samples, 3), scale=0.5),
        rng.normal(size=(n_samples, 3), scale=3.0),
        np.zeros(3),
        np.zeros(3),
    )


def timeit(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=11)
    ap.add_argument("--features", type=int, default=40)
    ap.add_argument("--factors", type=int, default=400)
    ap.add_argument("--imu-samples", type=int, default=1000)
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    w = window_problem(rng, args.frames, args.features, args.factors)
    two_view_args = (
        w["rot"], w["pos"], w["host"], w["tgt"], w["fidx"],
        w["z_i"], w["v_i"], w["z_j"], w["v_j"], w["inv_depth"],
        -0.004, 920.0, 1.0, args.frames,
    )
    imu_args = imu_problem(rng, args.imu_samples) + (0.001, 0.01, 0.0, 0.0)

    backends = [("python", _pycore)]
    if _fastcore is not None:
        backends.append(("compiled", _fastcore))
    else:
        print("compiled backend not built; showing fallback only")

    results = {}
    for name, be in backends:
        results[name] = {
            "two_view": be.accumulate_two_view(*two_view_args),
            "preint": be.preintegrate(*imu_args),
        }
    if len(backends) == 2:
        a, b = results["python"], results["compiled"]
        for out_a, out_b in zip(a["two_view"][:5], b["two_view"][:5]):
            scale = max(np.abs(out_a).max(initial=0.0), 1.0)
            assert np.allclose(out_a, out_b, rtol=1e-9, atol=1e-9 * scale)
        for out_a, out_b in zip(a["preint"][:5], b["preint"][:5]):
            assert np.allclose(out_a, out_b, rtol=1e-9, atol=1e-12)
        print("backends agree on both kernels")

    print(
        f"\n{args.factors} two-view factors over {args.frames} keyframes, "
        f"{args.imu_samples} IMU samples; best of {args.repeats}\n"
    )
    print(f"{'kernel':<22} " + " ".join(f"{n:>12}" for n, _ in backends) + "   speedup")
    rows = [
        ("two_view accumulate", lambda be: be.accumulate_two_view(*two_view_args)),
        ("preintegrate", lambda be: be.preintegrate(*imu_args)),
    ]
    for label, call in rows:
        times = [timeit(lambda be=be: call(be), args.repeats) for _, be in backends]
        cells = " ".join(f"{t * 1e3:9.3f} ms" for t in times)
        speed = f"{times[0] / times[-1]:8.1f}x" if len(times) == 2 else ""
        print(f"{label:<22} {cells} {speed}")


if __name__ == "__main__":
    main()
