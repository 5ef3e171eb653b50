"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel pair is also checked for bitwise-equal output before timing.
"""

import argparse
import time

import numpy as np

from perscen import _kernels


def _best_of(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.normal(size=(3000, 96))
    w = rng.normal(size=(96, 32))
    adj = rng.random(size=(4096, 9, 9))
    adj = (adj / adj.sum(-1, keepdims=True)).reshape(-1, 9)
    z = rng.normal(size=(4096, 16))
    codes = rng.normal(size=(10, 16))
    scores = rng.normal(size=(256, 10_000))
    return {
        "matmul 3000x96 @ 96x32": ("matmul", (x, w)),
        "topk_mask (4096*9)x9 k=5": ("topk_mask", (adj, 5)),
        "nearest_code 4096x16 C=10": ("nearest_code", (z, codes)),
        "topk_scores 256x10000 k=100": ("topk_scores", (scores, 100)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  equal")
    for label, (name, inputs) in cases(rng).items():
        impl = _kernels.implementations(name)
        ref = impl["numpy"](*inputs)
        got = impl["numba"](*inputs)  # also triggers compilation
        same = all(np.array_equal(a, b) for a, b in zip(np.atleast_1d(ref), np.atleast_1d(got))) \
            if isinstance(ref, tuple) else np.array_equal(ref, got)
        t_np = _best_of(impl["numpy"], inputs, args.repeat)
        t_nb = _best_of(impl["numba"], inputs, args.repeat)
        print(f"{label:32s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x  {same}")


if __name__ == "__main__":
    main()
