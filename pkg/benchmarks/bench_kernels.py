"""Compiled vs numpy kernels: wall time and agreement.

Usage: python benchmarks/bench_kernels.py [--repeat R]
"""
import argparse
import time

import numpy as np

from vqgb.kernels import _fallback

try:
    from vqgb.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    for n in (50, 200, 500):
        cost = np.ascontiguousarray(rng.random((n, n)))
        yield f"linear_assignment n={n}", "linear_assignment", (cost,)
    for n in (1000, 4000):
        x = np.ascontiguousarray(rng.standard_normal((n, 1)))
        y = rng.integers(0, 2, size=n).astype(np.int64)
        k = np.full(n, 3, dtype=np.int64)
        yield f"knn_radius_counts n={n}", "knn_radius_counts", (x, y, k)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'case':32s} {'cython [s]':>11s} {'numpy [s]':>11s} {'speedup':>8s}  agree")
    for label, name, inputs in cases(rng):
        tc, oc = best_of(lambda: getattr(_ckernels, name)(*inputs), args.repeat)
        tp, op = best_of(lambda: getattr(_fallback, name)(*inputs), args.repeat)
        if name == "linear_assignment":
            cost = inputs[0]
            rows = np.arange(cost.shape[0])
            agree = np.isclose(cost[rows, oc].sum(), cost[rows, op].sum(), rtol=0, atol=1e-9)
        else:
            agree = np.allclose(oc[0], op[0]) and np.array_equal(oc[1], op[1])
        print(f"{label:32s} {tc:11.4f} {tp:11.4f} {tp / tc:8.1f}  {bool(agree)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
