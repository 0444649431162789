#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure NumPy fallback.

Shapes mirror the training data path: border-clamped bilinear gathers for
crop/rotate/warp at batch augmentation sizes, and displacement-field blurs.

    python bench/bench_kernels.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from sslprof._kernels import HAVE_EXT, pure

if HAVE_EXT:
    from sslprof._kernels import _ops
else:
    _ops = None


def timeit(fn, repeats):
    fn()  # warmup
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def gaussian_taps(sigma):
    half = int(np.ceil(3 * sigma))
    xs = np.arange(-half, half + 1)
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    return taps / taps.sum()


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    rows = []

    for h, w, c in [(48, 48, 5), (64, 64, 5), (64, 64, 8), (128, 128, 5)]:
        src = rng.random((h, w, c), dtype=np.float32)
        ys = rng.uniform(-1, h, (h, w))
        xs = rng.uniform(-1, w, (h, w))
        t_pure = timeit(lambda: pure.bilinear_gather(src, ys, xs), args.repeats)
        t_ext = (
            timeit(lambda: _ops.bilinear_gather(src, ys, xs), args.repeats)
            if _ops
            else float("nan")
        )
        rows.append((f"bilinear_gather {h}x{w}x{c}", t_pure, t_ext))

    for size, sigma in [(48, 8.0), (64, 8.0), (64, 40.0), (128, 16.0)]:
        field = rng.standard_normal((size, size))
        taps = gaussian_taps(sigma)
        t_pure = timeit(lambda: pure.separable_blur(field, taps), args.repeats)
        t_ext = (
            timeit(lambda: _ops.separable_blur(field, taps), args.repeats)
            if _ops
            else float("nan")
        )
        rows.append((f"separable_blur {size}^2 sigma={sigma:g}", t_pure, t_ext))

    print(f"compiled extension available: {HAVE_EXT}")
    print(f"{'kernel':34s} {'python':>10s} {'ext':>10s} {'speedup':>8s}")
    for name, t_pure, t_ext in rows:
        speed = t_pure / t_ext if t_ext == t_ext else float("nan")
        print(f"{name:34s} {t_pure * 1e6:8.1f}us {t_ext * 1e6:8.1f}us {speed:7.2f}x")


if __name__ == "__main__":
    main()
