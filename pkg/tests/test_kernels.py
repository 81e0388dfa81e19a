import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hospitalsim import kernels


def scan_oracle(matrix, query, k):
    """Independent full-scan sort: similarity descending, smaller index on ties."""
    norms = [float(np.linalg.norm(row)) for row in matrix]
    qn = float(np.linalg.norm(query))
    sims = [float(np.dot(row, query)) / (norms[i] * qn) for i, row in enumerate(matrix)]
    order = sorted(range(len(matrix)), key=lambda i: (-sims[i], i))
    return order[:k]


def all_paths():
    paths = [("numpy", kernels.cosine_topk_numpy)]
    if kernels.cosine_topk_numba is not None:
        paths.append(("numba", kernels.cosine_topk_numba))
    return paths


@pytest.mark.parametrize("name,fn", all_paths())
def test_matches_oracle_with_ties(name, fn):
    rng = np.random.default_rng(7)
    for _ in range(30):
        n = int(rng.integers(1, 300))
        dim = int(rng.choice([8, 16, 64]))
        k = int(rng.integers(0, 10))
        matrix = rng.standard_normal((n, dim))
        if n > 4:
            matrix[2] = matrix[0]
            matrix[n - 1] = matrix[0]
        matrix = np.ascontiguousarray(matrix)
        norms = kernels.row_norms(matrix)
        query = np.ascontiguousarray(rng.standard_normal(dim))
        top, sims = fn(matrix, norms, query, float(np.linalg.norm(query)), k)
        assert list(top) == scan_oracle(matrix, query, k)
        assert list(sims) == sorted(sims, reverse=True)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(st.integers(min_value=-5, max_value=5), min_size=4, max_size=4),
        min_size=1,
        max_size=40,
    ).filter(lambda rows: all(any(v != 0 for v in row) for row in rows)),
    st.integers(min_value=0, max_value=8),
)
def test_paths_agree_on_integer_grids(rows, k):
    # integer-valued vectors produce exactly representable dot products, so
    # ties are common and both paths must break them identically
    matrix = np.ascontiguousarray(np.array(rows, dtype=np.float64))
    norms = kernels.row_norms(matrix)
    query = np.ones(4)
    oracle = scan_oracle(matrix, query, k)
    for _name, fn in all_paths():
        top, _ = fn(matrix, norms, query, float(np.linalg.norm(query)), k)
        assert list(top) == oracle


def test_k_zero_and_k_beyond_n():
    matrix = np.ascontiguousarray(np.eye(3))
    norms = kernels.row_norms(matrix)
    query = np.array([1.0, 0.5, 0.0])
    qn = float(np.linalg.norm(query))
    for _name, fn in all_paths():
        top, sims = fn(matrix, norms, query, qn, 0)
        assert len(top) == 0
        top, sims = fn(matrix, norms, query, qn, 10)
        assert len(top) == 3


def test_env_flag_disables_numba():
    code = (
        "import os; os.environ['HOSPITALSIM_NO_NUMBA'] = '1';"
        "from hospitalsim import kernels;"
        "assert not kernels.USING_NUMBA;"
        "assert kernels.cosine_topk is kernels.cosine_topk_numpy"
    )
    subprocess.run([sys.executable, "-c", code], check=True)
