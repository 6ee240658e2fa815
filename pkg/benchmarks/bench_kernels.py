"""Benchmark the numba kernels against their pure-numpy twins.

Run:  python benchmarks/bench_kernels.py [--repeat N]

Times each hot kernel on representative desk-scale and larger inputs
under both backends and prints the speedup.  The first numba call per
kernel is excluded (JIT compilation).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from trimodal import accel


def bench(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(rng):
    a_small = rng.standard_normal((64, 16))
    b_small = rng.standard_normal((64, 16))
    a_big = rng.standard_normal((600, 64))
    b_big = rng.standard_normal((500, 64))
    w_small = rng.standard_normal((64, 64))
    w_big = rng.standard_normal((600, 500))

    hits = rng.random((400, 800)) < 0.05

    v = rng.random((420, 420))
    v /= v.sum(axis=1, keepdims=True)

    cases = [
        ("pairwise_dist 64x16", accel.pairwise_dist, (a_small, b_small)),
        ("pairwise_dist 600x64", accel.pairwise_dist, (a_big, b_big)),
        (
            "weighted_dist_grad 64",
            accel.weighted_dist_grad,
            (a_small, b_small, accel.pairwise_dist(a_small, b_small), w_small),
        ),
        (
            "weighted_dist_grad 600",
            accel.weighted_dist_grad,
            (a_big, b_big, accel.pairwise_dist(a_big, b_big), w_big),
        ),
        ("rank_stats 400x800", accel.rank_stats, (hits,)),
        ("jaccard_dist 400x20", accel.jaccard_dist, (v[:400], v[400:])),
    ]
    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = make_cases(rng)

    results = {}
    for backend in ("numpy", "numba") if accel.HAVE_NUMBA else ("numpy",):
        accel.set_backend(backend)
        for name, fn, fn_args in cases:
            results.setdefault(name, {})[backend] = bench(fn, fn_args, args.repeat)

    width = max(len(name) for name in results)
    header = f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, times in results.items():
        np_t = times["numpy"]
        if "numba" in times:
            nb_t = times["numba"]
            print(f"{name:<{width}}  {np_t * 1e6:>8.1f}us  {nb_t * 1e6:>8.1f}us  {np_t / nb_t:>7.2f}x")
        else:
            print(f"{name:<{width}}  {np_t * 1e6:>8.1f}us  {'n/a':>10}  {'n/a':>8}")


if __name__ == "__main__":
    main()
