"""Benchmark the compiled kernels against the pure-numpy fallback.

Run: python benchmarks/bench_kernels.py [--repeats N]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from sycam.kernels import _numpy_impl

try:
    from sycam.kernels import _cy_impl
except ImportError:
    _cy_impl = None


def bench(fn, *args, repeats: int) -> float:
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    k, gh, gw = 512, 14, 14
    ch, height, width = 3, 224, 224
    weights = rng.normal(size=k)
    fmaps = rng.normal(size=(k, gh, gw)).astype(np.float32)
    grid = rng.normal(size=(gh, gw))
    image = rng.normal(size=(ch, height, width))
    patch = rng.normal(size=(ch, height, width))
    cells = np.stack(
        [rng.integers(0, gh, size=30), rng.integers(0, gw, size=30)], axis=1
    ).astype(np.int64)

    cases = [
        ("accumulate_saliency", (weights, fmaps)),
        ("relu_minmax", (grid,)),
        ("bilinear_resize", (grid, height, width)),
        ("perturbation_sequence", (image, patch, cells, gh, gw)),
    ]
    print(f"{'kernel':<24}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>9}")
    for name, call_args in cases:
        t_np = bench(getattr(_numpy_impl, name), *call_args, repeats=args.repeats)
        if _cy_impl is None:
            print(f"{name:<24}{t_np * 1e3:>12.3f}{'n/a':>13}{'-':>9}")
            continue
        t_cy = bench(getattr(_cy_impl, name), *call_args, repeats=args.repeats)
        print(f"{name:<24}{t_np * 1e3:>12.3f}{t_cy * 1e3:>13.3f}{t_np / t_cy:>9.2f}")


if __name__ == "__main__":
    main()
