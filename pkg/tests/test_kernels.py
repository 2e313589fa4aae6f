import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcore import _kernels
from tcore._kernels import python as py

needs_native = pytest.mark.skipif(_kernels.native is None, reason="compiled kernels not built")


def random_csr(rng, n, p):
    adj = rng.random((n, n)) < p
    adj = adj | adj.T
    np.fill_diagonal(adj, True)
    indptr = np.concatenate([[0], np.cumsum(adj.sum(1))]).astype(np.int64)
    return indptr, np.nonzero(adj)[1].astype(np.int64)


def test_backend_selected():
    assert _kernels.BACKEND in ("cython", "python")


def test_python_dbscan_chain():
    # 0-1-2 chain with min_pts 2, 3 isolated
    indptr = np.array([0, 2, 5, 7, 8])
    indices = np.array([0, 1, 0, 1, 2, 1, 2, 3])
    assert py.dbscan_labels(indptr, indices, 2).tolist() == [0, 0, 0, -1]
    assert py.dbscan_labels(indptr, indices, 3).tolist() == [0, 0, 0, -1]
    assert py.dbscan_labels(indptr, indices, 4).tolist() == [-1, -1, -1, -1]


def test_python_consistent_counts():
    nb = np.array([[[1, 2, 3]], [[3, 2, 4]]])
    assert py.consistent_counts(nb, np.array([0, 1, 1, 0, 1], np.uint8)).tolist() == [1]


@needs_native
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.floats(0.0, 0.4), st.integers(1, 6))
def test_dbscan_backends_agree(seed, n, p, min_pts):
    indptr, indices = random_csr(np.random.default_rng(seed), n, p)
    assert np.array_equal(_kernels.native.dbscan_labels(indptr, indices, min_pts),
                          py.dbscan_labels(indptr, indices, min_pts))


@needs_native
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 30), st.integers(1, 8))
def test_consistent_backends_agree(seed, layers, n, m):
    rng = np.random.default_rng(seed)
    pool = n + m + 1
    nb = np.stack([np.stack([rng.choice(pool, m, replace=False) for _ in range(n)]) for _ in range(layers)])
    same = (rng.random(pool) < 0.5).astype(np.uint8)
    assert np.array_equal(_kernels.native.consistent_counts(nb, same), py.consistent_counts(nb, same))
