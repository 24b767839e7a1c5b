#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Runs the convolution forward/backward pair and connected-component labeling
over shapes representative of training (P=64 decoder/encoder convs) and
full-scale inference (P=512 stem), printing per-shape timings for both
backends and their agreement.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from histoseg._kernels import BACKEND, numpy_backend

try:
    from histoseg._kernels import _fastcore
except ImportError:
    _fastcore = None

CONV_SHAPES = [
    # (label, n, cin, h, w, cout, k, stride)
    ("stem 7x7/2 P=64", 8, 3, 64, 64, 16, 7, 2),
    ("enc 3x3 16ch 16px", 8, 16, 16, 16, 16, 3, 1),
    ("enc 3x3/2 32ch 8px", 8, 32, 8, 8, 64, 3, 2),
    ("dec 3x3 48->16 32px", 8, 48, 32, 32, 16, 3, 1),
    ("head 1x1 16->2 64px", 8, 16, 64, 64, 2, 1, 1),
    ("stem 7x7/2 P=512", 1, 3, 512, 512, 64, 7, 2),
]


def time_call(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(repeat):
    rng = np.random.default_rng(0)
    print(f"{'shape':26} {'fwd numpy':>10} {'fwd cython':>11} "
          f"{'bwd numpy':>10} {'bwd cython':>11}  max|diff|")
    for label, n, cin, h, w, cout, k, s in CONV_SHAPES:
        x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
        wt = (rng.standard_normal((cout, cin, k, k)) * 0.1).astype(np.float32)
        pad = k // 2
        out_np = numpy_backend.conv2d_forward(x, wt, s, pad)
        g = rng.standard_normal(out_np.shape).astype(np.float32)

        t_fwd_np = time_call(lambda: numpy_backend.conv2d_forward(x, wt, s, pad), repeat)
        t_bwd_np = time_call(lambda: numpy_backend.conv2d_backward(g, x, wt, s, pad), repeat)
        if _fastcore is not None:
            out_cy = _fastcore.conv2d_forward(x, wt, s, pad)
            t_fwd_cy = time_call(lambda: _fastcore.conv2d_forward(x, wt, s, pad), repeat)
            t_bwd_cy = time_call(lambda: _fastcore.conv2d_backward(g, x, wt, s, pad), repeat)
            diff = np.abs(out_np - out_cy).max()
            print(f"{label:26} {t_fwd_np * 1e3:8.2f}ms {t_fwd_cy * 1e3:9.2f}ms "
                  f"{t_bwd_np * 1e3:8.2f}ms {t_bwd_cy * 1e3:9.2f}ms  {diff:.2e}")
        else:
            print(f"{label:26} {t_fwd_np * 1e3:8.2f}ms {'-':>11} "
                  f"{t_bwd_np * 1e3:8.2f}ms {'-':>11}")


def bench_ccl(repeat):
    rng = np.random.default_rng(1)
    print(f"\n{'mask':26} {'numpy':>10} {'cython':>11}  regions")
    for label, shape, density in [("ccl 64x64 p=.35", (64, 64), 0.35),
                                  ("ccl 512x512 p=.35", (512, 512), 0.35),
                                  ("ccl 512x512 p=.55", (512, 512), 0.55)]:
        mask = rng.random(shape) < density
        labels_np, n_np = numpy_backend.label_regions(mask)
        t_np = time_call(lambda: numpy_backend.label_regions(mask), repeat)
        if _fastcore is not None:
            labels_cy, n_cy = _fastcore.label_regions(mask)
            assert n_np == n_cy and (labels_np == labels_cy).all()
            t_cy = time_call(lambda: _fastcore.label_regions(mask), repeat)
            print(f"{label:26} {t_np * 1e3:8.2f}ms {t_cy * 1e3:9.2f}ms  {n_np}")
        else:
            print(f"{label:26} {t_np * 1e3:8.2f}ms {'-':>11}  {n_np}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {BACKEND}"
          + ("" if _fastcore is not None else " (extension not built)"))
    bench_conv(args.repeat)
    bench_ccl(args.repeat)


if __name__ == "__main__":
    main()
