"""Compare the compiled kernels with the pure-Python fallback.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N]``. Inputs are a full simulated
scan ring with distance-adaptive kernel sizes and a rendered valve depth frame, i.e. what
the detector and the valve pipeline feed the kernels in practice.
"""
import argparse
import timeit

import numpy as np

from valvebot import _kernels_py, kernels
from valvebot.detector import DetectorParams, kernel_sizes_array
from valvebot.geometry import Pose3
from valvebot.scansim import LidarModel, PanelGeometry, Scene, raycast_scan
from valvebot.valve import ValvePerceptParams, extract_foreground, synthetic_valve_frames


def ring_inputs():
    scene = Scene(tuple(PanelGeometry().boxes_at(8.0, 2.0, 0.3)))
    scan = raycast_scan(scene, Pose3(0, 0, 0.9), LidarModel(range_noise_sigma=0.01), seed=0)
    ring = max(scan.rings, key=lambda r: np.isfinite(r.ranges).sum())
    ranges = np.where(np.isfinite(ring.ranges), ring.ranges, scan.max_range)
    noise_k, bg_k = kernel_sizes_array(DetectorParams().object_width, np.maximum(ranges, 1.0), ring.azimuth_step)
    return ranges, noise_k, bg_k


def frame_inputs():
    frames, _ = synthetic_valve_frames(1)
    mask = extract_foreground(frames[0]).astype(np.uint8)
    return mask, frames[0].depth, ValvePerceptParams().cluster_tolerance


def bench(name, compiled, python, args, repeat):
    a = compiled(*args)
    b = python(*args)
    agree = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
    tc = min(timeit.repeat(lambda: compiled(*args), number=1, repeat=repeat))
    tp = min(timeit.repeat(lambda: python(*args), number=1, repeat=max(1, repeat // 5)))
    print(f"{name:<18} compiled {tc * 1e3:9.3f} ms   python {tp * 1e3:9.3f} ms   "
          f"speed-up {tp / tc:7.1f}x   identical {agree}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    ranges, nk, bk = ring_inputs()
    print(f"ring: {len(ranges)} samples, kernels {int(nk.min())}-{int(bk.max())}")
    bench("ring_medians", kernels.ring_medians, _kernels_py.ring_medians, (ranges, nk, bk), args.repeat)
    mask, depth, tol = frame_inputs()
    print(f"frame: {mask.shape[1]} x {mask.shape[0]}, {int(mask.sum())} foreground pixels")
    bench("label_depth_gated", kernels.label_depth_gated, _kernels_py.label_depth_gated, (mask, depth, tol),
          args.repeat)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
