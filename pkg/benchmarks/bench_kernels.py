"""Time the numba and numpy versions of each evaluation/bias kernel.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--n 40000] [--m 80]

The first numba call (compilation) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from ctxbias.kernels import IMPLEMENTATIONS


def bench(fn, args, repeat):
    fn(*args)  # warm-up / jit compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=40_000, help="images")
    ap.add_argument("--m", type=int, default=80, help="categories")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    scores = rng.random((args.n, args.m))
    labels = (rng.random((args.n, args.m)) < 0.05).astype(np.uint8)
    inputs = {
        "ranked_ap": (labels[:, 0].astype(np.float64),),
        "column_rank": (scores, args.m // 2),
        "pair_sums": (scores, labels),
    }

    print(f"N={args.n} M={args.m}, best of {args.repeat}")
    print(f"{'kernel':<12} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, impls in IMPLEMENTATIONS.items():
        t_nb = bench(impls["numba"], inputs[name], args.repeat)
        t_np = bench(impls["numpy"], inputs[name], args.repeat)
        print(f"{name:<12} {1e3 * t_nb:>10.3f} {1e3 * t_np:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
