import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from raincast import _accel, kernels as K

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def _graph(seed, n=6, p=0.5, B=5, D=3):
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for j in range(n) for i in range(n) if i != j and rng.random() < p]
    if not pairs:
        pairs = [(0, 1)]
    src = np.array([a for a, _ in pairs], dtype=np.int64)
    dst = np.array([b for _, b in pairs], dtype=np.int64)
    iso = np.ones(n, dtype=np.bool_)
    iso[dst] = False
    return rng, src, dst, iso, B, D, n


@needs_numba
@pytest.mark.parametrize("seed", range(8))
def test_softmax_backends_agree(seed):
    rng, src, dst, iso, B, D, n = _graph(seed)
    e = rng.normal(size=(B, src.size)) * 5
    a1 = K.segment_softmax_numpy(e, dst, n)
    a2 = K.segment_softmax_numba(e, dst, n)
    np.testing.assert_allclose(a1, a2, rtol=0, atol=1e-14)
    g = rng.normal(size=e.shape)
    np.testing.assert_allclose(K.segment_softmax_backward_numpy(g, a1, dst, n),
                               K.segment_softmax_backward_numba(g, a1, dst, n), atol=1e-13)


@needs_numba
@pytest.mark.parametrize("seed", range(8))
def test_aggregate_backends_agree(seed):
    rng, src, dst, iso, B, D, n = _graph(seed, p=0.3)
    alpha = K.segment_softmax_numpy(rng.normal(size=(B, src.size)), dst, n)
    Z = rng.normal(size=(B, n, D))
    np.testing.assert_allclose(K.aggregate_numpy(alpha, Z, src, dst, iso),
                               K.aggregate_numba(alpha, Z, src, dst, iso), atol=1e-13)
    dM = rng.normal(size=(B, n, D))
    for x, y in zip(K.aggregate_backward_numpy(dM, alpha, Z, src, dst, iso),
                    K.aggregate_backward_numba(dM, alpha, Z, src, dst, iso)):
        np.testing.assert_allclose(x, y, atol=1e-13)


@needs_numba
def test_idw_and_profile_backends_agree(rng):
    px, py, v = rng.uniform(0, 10, 7), rng.uniform(0, 10, 7), rng.uniform(0, 100, 7)
    gx, gy = rng.uniform(0, 10, 200), rng.uniform(0, 10, 200)
    gx[:3], gy[:3] = px[:3], py[:3]
    np.testing.assert_allclose(K.idw_numpy(px, py, v, gx, gy, 2.0, 1e-9),
                               K.idw_numba(px, py, v, gx, gy, 2.0, 1e-9), rtol=1e-13)
    x = rng.exponential(3.0, 300)
    th = np.linspace(-1 / x.max() * 0.999, 2.0, 101)
    a, b = K.gpd_profile_loglik_numpy(x, th, 1e-12), K.gpd_profile_loglik_numba(x, th, 1e-12)
    np.testing.assert_allclose(a[np.isfinite(a)], b[np.isfinite(b)], rtol=1e-10)
    assert np.array_equal(np.isfinite(a), np.isfinite(b))


def test_softmax_closed_form_two_edges():
    e = np.array([[0.0, np.log(3.0)]])
    a = K.segment_softmax(e, np.array([0, 0]), 1)
    np.testing.assert_allclose(a, [[0.25, 0.75]], atol=1e-15)


def test_softmax_is_shift_invariant_per_segment(rng):
    _, src, dst, _, B, _, n = _graph(3)
    e = rng.normal(size=(B, src.size))
    shifted = e + rng.normal(size=(B, n))[:, dst] * 100
    np.testing.assert_allclose(K.segment_softmax(e, dst, n), K.segment_softmax(shifted, dst, n), atol=1e-12)


@given(st.integers(0, 10_000))
def test_softmax_segments_sum_to_one(seed):
    rng, src, dst, _, B, _, n = _graph(seed)
    a = K.segment_softmax(rng.normal(size=(B, src.size)) * 20, dst, n)
    sums = np.zeros((B, n))
    np.add.at(sums, (slice(None), dst), a)
    np.testing.assert_allclose(sums[:, np.unique(dst)], 1.0, atol=1e-12)


def test_isolated_node_keeps_own_embedding(rng):
    Z = rng.normal(size=(1, 3, 2))
    src, dst = np.array([0]), np.array([1])
    iso = np.array([True, False, True])
    out = K.aggregate(np.ones((1, 1)), Z, src, dst, iso)
    np.testing.assert_array_equal(out[0, 0], Z[0, 0])
    np.testing.assert_array_equal(out[0, 1], Z[0, 0])


def test_backend_flag_selects_numpy():
    env = dict(os.environ, RAINCAST_DISABLE_NUMBA="1")
    code = "import raincast, raincast.kernels as k; print(raincast.backend(), k.aggregate.__name__)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "aggregate_numpy"]


@needs_numba
def test_default_backend_is_numba():
    env = {k: v for k, v in os.environ.items() if k != "RAINCAST_DISABLE_NUMBA"}
    code = "import raincast; print(raincast.backend())"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"
