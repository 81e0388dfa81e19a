#!/usr/bin/env python3
"""Benchmark the retrieval scan kernels: numba @njit vs pure numpy.

Run:  python benchmarks/bench_retrieval.py
(Set HOSPITALSIM_NO_NUMBA=1 to confirm the fallback path is what the numpy
column measures.)
"""

from __future__ import annotations

import time

import numpy as np

from hospitalsim import kernels


def bench(fn, matrix, norms, queries, k, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for q in queries:
            fn(matrix, norms, q, float(np.linalg.norm(q)), k)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    rng = np.random.default_rng(0)
    n_queries = 200
    k = 4
    print(f"{'entries':>8} {'dim':>4} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>8}")
    for n, dim in [(1_000, 16), (10_000, 16), (10_000, 64), (50_000, 64)]:
        matrix = np.ascontiguousarray(rng.standard_normal((n, dim)))
        norms = kernels.row_norms(matrix)
        queries = [np.ascontiguousarray(rng.standard_normal(dim)) for _ in range(n_queries)]
        t_np = bench(kernels.cosine_topk_numpy, matrix, norms, queries, k)
        if kernels.cosine_topk_numba is not None:
            kernels.cosine_topk_numba(matrix, norms, queries[0],
                                      float(np.linalg.norm(queries[0])), k)  # compile
            t_nb = bench(kernels.cosine_topk_numba, matrix, norms, queries, k)
            print(f"{n:>8} {dim:>4} {t_np * 1e3:>12.2f} {t_nb * 1e3:>12.2f} "
                  f"{t_np / t_nb:>8.2f}x")
        else:
            print(f"{n:>8} {dim:>4} {t_np * 1e3:>12.2f} {'n/a':>12} {'':>8}")
    if kernels.cosine_topk_numba is None:
        print("\nnumba unavailable or disabled; only the numpy path was measured")


if __name__ == "__main__":
    main()
