"""Benchmark the segment scatter kernels: numba JIT vs pure-numpy fallback.

The scatter loops are the hot path of every forward/backward pass once the
matrix products are delegated to BLAS, and the two backends are required to
be bit-identical; this script verifies that on random data and then times
both on a graph-shaped workload (many edge rows accumulated into far fewer
segment rows).

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --rows 500000 --cols 64
"""

import argparse
import time

import numpy as np

from pathsurv import kernels


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def make_workload(rng, rows, cols, segments):
    values = rng.standard_normal((rows, cols))
    index = rng.integers(0, segments, size=rows).astype(np.int64)
    return values, index


def bench_one(label, numpy_fn, numba_fn, make_out, index, values, repeats):
    out_numpy = numpy_fn(make_out(), index, values)
    t_numpy = best_of(lambda: numpy_fn(make_out(), index, values), repeats)
    line = f"{label:<14} numpy {t_numpy * 1e3:8.2f} ms"
    if numba_fn is not None:
        out_numba = numba_fn(make_out(), index, values)
        if not np.array_equal(out_numpy, out_numba):
            raise AssertionError(f"{label}: backends disagree")
        t_numba = best_of(lambda: numba_fn(make_out(), index, values),
                          repeats)
        line += (f"   numba {t_numba * 1e3:8.2f} ms"
                 f"   speedup {t_numpy / t_numba:6.2f}x   (bit-identical)")
    print(line)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=200_000,
                        help="edge rows to scatter (default 200000)")
    parser.add_argument("--cols", type=int, default=32,
                        help="feature width (default 32)")
    parser.add_argument("--segments", type=int, default=20_000,
                        help="destination rows (default 20000)")
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats, best-of (default 5)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    values, index = make_workload(rng, args.rows, args.cols, args.segments)
    print(f"workload: {args.rows} rows x {args.cols} cols "
          f"-> {args.segments} segments, best of {args.repeats}")
    print(f"active backend in this process: {kernels.active_backend()}")

    numba_add = kernels._scatter_add_rows_numba
    numba_max = kernels._scatter_max_rows_numba
    if numba_add is None:
        print("numba not importable: timing the numpy fallback only")
    else:
        # compile outside the timed region
        warm = np.zeros((args.segments, args.cols))
        numba_add(warm, index[:1], values[:1])
        numba_max(warm, index[:1], values[:1])

    def zeros():
        return np.zeros((args.segments, args.cols))

    def neg_inf():
        return np.full((args.segments, args.cols), -np.inf)

    bench_one("scatter_add", kernels._scatter_add_rows_numpy, numba_add,
              zeros, index, values, args.repeats)
    bench_one("scatter_max", kernels._scatter_max_rows_numpy, numba_max,
              neg_inf, index, values, args.repeats)


if __name__ == "__main__":
    main()
