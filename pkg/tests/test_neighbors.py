import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import knn_brute

from pointfill.neighbors import knn, knn_squared


def _cloud(rng, n, quantize=False):
    pts = rng.random((n, 3))
    if quantize:
        # coarse coordinates force many exactly tied distances
        pts = np.round(pts * 4) / 4
    return pts


@pytest.mark.parametrize("chunk,ref_chunk", [(1, 4096), (7, 5), (64, 64), (4096, 3)])
def test_matches_brute_force_with_ties(chunk, ref_chunk):
    rng = np.random.default_rng(3)
    q = _cloud(rng, 60, quantize=True)
    r = _cloud(rng, 90, quantize=True)
    for k in (1, 4, 8):
        idx, d2 = knn_squared(q, r, k, chunk=chunk, ref_chunk=ref_chunk)
        ri, rd = knn_brute(q, r, k)
        np.testing.assert_array_equal(idx, ri)
        np.testing.assert_array_equal(d2, rd)


def test_exclude_self():
    rng = np.random.default_rng(0)
    p = _cloud(rng, 50)
    idx, d2 = knn_squared(p, p, 3, exclude_self=True, chunk=8)
    ri, rd = knn_brute(p, p, 3, exclude_self=True)
    np.testing.assert_array_equal(idx, ri)
    np.testing.assert_array_equal(d2, rd)
    assert not np.any(idx == np.arange(50)[:, None])


def test_exclude_self_with_duplicates_keeps_twin():
    p = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
    idx, d2 = knn_squared(p, p, 1, exclude_self=True)
    assert idx[:, 0].tolist() == [1, 0, 0]
    assert d2[0, 0] == 0.0


def test_distances_are_sqrt_and_sorted():
    rng = np.random.default_rng(1)
    q, r = _cloud(rng, 30), _cloud(rng, 40)
    res = knn(q, r, 5)
    _, d2 = knn_squared(q, r, 5)
    np.testing.assert_array_equal(res.distances, np.sqrt(d2))
    assert np.all(np.diff(res.distances, axis=1) >= 0)


def test_errors():
    p = np.zeros((3, 3))
    with pytest.raises(ValueError):
        knn_squared(p, p, 4)
    with pytest.raises(ValueError):
        knn_squared(np.zeros((0, 3)), p, 1)
    with pytest.raises(ValueError):
        knn_squared(p, p, 0)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 40),
    m=st.integers(1, 40),
    k=st.integers(1, 6),
    chunk=st.integers(1, 50),
    ref_chunk=st.integers(1, 50),
    seed=st.integers(0, 2**31),
)
def test_chunking_never_changes_result(n, m, k, chunk, ref_chunk, seed):
    k = min(k, m)
    rng = np.random.default_rng(seed)
    q, r = _cloud(rng, n, quantize=True), _cloud(rng, m, quantize=True)
    a = knn_squared(q, r, k, chunk=chunk, ref_chunk=ref_chunk)
    b = knn_squared(q, r, k)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_full_size_instance():
    rng = np.random.default_rng(11)
    q = _cloud(rng, 5000, quantize=False)
    idx, d2 = knn_squared(q, q, 4, chunk=64)
    ri, rd = knn_brute(q[:200], q, 4)
    np.testing.assert_array_equal(idx[:200], ri)
    np.testing.assert_array_equal(d2[:200], rd)
