"""Hot kernels for the vector-base retrieval scan.

Retrieval is an exact brute-force cosine scan over every eligible entry,
executed once per doctor decision. The scan is the only numeric inner loop
in the package, so it gets a numba-compiled kernel with a pure-numpy
fallback. Set ``HOSPITALSIM_NO_NUMBA=1`` to force the fallback (the numpy
path is also used automatically when numba is not importable).

Both paths implement identical semantics: similarities sorted descending,
ties broken by the smaller row index (stable sort on the negated scores).
``benchmarks/bench_retrieval.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

DISABLE_ENV = "HOSPITALSIM_NO_NUMBA"


def cosine_topk_numpy(
    matrix: np.ndarray,
    norms: np.ndarray,
    query: np.ndarray,
    qnorm: float,
    k: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k cosine rows of `matrix` against `query`; BLAS matvec path."""
    sims = matrix @ query
    sims /= norms * qnorm
    order = np.argsort(-sims, kind="stable")
    m = min(k, matrix.shape[0])
    top = order[:m]
    return top, sims[top]


_disabled = os.environ.get(DISABLE_ENV, "").strip().lower() in {"1", "true", "yes", "on"}

if not _disabled:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        njit = None
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _cosine_topk_jit(matrix, norms, query, qnorm, k):
        # Fused scan + insertion selection: O(n*(d+k)). The buffer is kept
        # sorted (similarity descending); an incoming equal similarity never
        # displaces a buffered one, which is exactly the smaller-index tie
        # rule because rows are visited in index order.
        n, d = matrix.shape
        m = k if k < n else n
        top_idx = np.empty(m, dtype=np.int64)
        top_sim = np.empty(m, dtype=np.float64)
        if m == 0:
            return top_idx, top_sim
        count = 0
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += matrix[i, j] * query[j]
            sim = acc / (norms[i] * qnorm)
            if count < m:
                p = count
                while p > 0 and top_sim[p - 1] < sim:
                    top_sim[p] = top_sim[p - 1]
                    top_idx[p] = top_idx[p - 1]
                    p -= 1
                top_sim[p] = sim
                top_idx[p] = i
                count += 1
            elif sim > top_sim[m - 1]:
                p = m - 1
                while p > 0 and top_sim[p - 1] < sim:
                    top_sim[p] = top_sim[p - 1]
                    top_idx[p] = top_idx[p - 1]
                    p -= 1
                top_sim[p] = sim
                top_idx[p] = i
        return top_idx, top_sim

    def cosine_topk_numba(matrix, norms, query, qnorm, k):
        return _cosine_topk_jit(
            np.ascontiguousarray(matrix), norms, np.ascontiguousarray(query), qnorm, k
        )

    USING_NUMBA = True
    cosine_topk = cosine_topk_numba
else:
    cosine_topk_numba = None
    USING_NUMBA = False
    cosine_topk = cosine_topk_numpy


def row_norms(matrix: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
