import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itta import kernels

import oracles

needs_numba = pytest.mark.skipif("numba" not in kernels.BACKENDS, reason="numba not installed")
NP = kernels.BACKENDS["numpy"]


def _pair():
    return NP, kernels.BACKENDS["numba"]


@needs_numba
def test_backends_agree_on_row_kernels(rng):
    npb, nbb = _pair()
    x = rng.standard_normal((7, 12))
    g, b = rng.standard_normal(12), rng.standard_normal(12)
    gout = rng.standard_normal((7, 12))
    for got, want in zip(nbb.layer_norm_fwd(x, g, b, 1e-5), npb.layer_norm_fwd(x, g, b, 1e-5)):
        assert np.allclose(got, want, atol=1e-12)
    _, xhat, rstd = npb.layer_norm_fwd(x, g, b, 1e-5)
    for got, want in zip(nbb.layer_norm_bwd(gout, xhat, rstd, g), npb.layer_norm_bwd(gout, xhat, rstd, g)):
        assert np.allclose(got, want, atol=1e-12)
    (ya, ca), (yb, cb) = nbb.gelu_fwd(x), npb.gelu_fwd(x)
    assert np.allclose(ya, yb, atol=1e-14) and np.allclose(ca, cb, atol=1e-14)
    assert np.allclose(nbb.gelu_bwd(x, ca, gout), npb.gelu_bwd(x, cb, gout), atol=1e-13)
    sm = npb.softmax_rows(x)
    assert np.allclose(nbb.softmax_rows(x), sm, atol=1e-15)
    assert np.allclose(nbb.softmax_bwd(sm, gout), npb.softmax_bwd(sm, gout), atol=1e-13)
    assert np.allclose(nbb.row_dots(x, g), npb.row_dots(x, g), atol=1e-12)
    w = npb.softmax_rows(rng.standard_normal((3, 4)))
    rows = rng.standard_normal((3, 4, 5))
    assert np.allclose(nbb.weighted_rows(w, rows), npb.weighted_rows(w, rows), atol=1e-14)


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=25))
def test_backends_agree_on_ap(labels):
    npb, nbb = _pair()
    y = np.array(labels, dtype=np.float64)
    a, b = npb.ap_sorted(y), nbb.ap_sorted(y)
    assert (np.isnan(a) and np.isnan(b)) or a == b


@needs_numba
def test_backends_agree_on_hash_and_histogram(rng):
    npb, nbb = _pair()
    words = [b"dog", b"", b"\xc3\xa9t\xc3\xa9", b"a" * 40]
    offsets = np.zeros(len(words) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(w) for w in words])
    buf = np.frombuffer(b"".join(words), dtype=np.uint8)
    ka, kb = npb.fnv1a(buf, offsets), nbb.fnv1a(buf, offsets)
    assert np.array_equal(ka, kb)
    assert np.array_equal(npb.hash_uniform(ka, np.uint64(42), 16), nbb.hash_uniform(kb, np.uint64(42), 16))
    s = rng.random(500)
    s[:3] = [0.0, 1.0, 0.5]
    assert np.array_equal(npb.histogram(s, 64), nbb.histogram(s, 64))


def test_fnv1a_matches_reference():
    words = [b"dog", b"corgi", b""]
    offsets = np.array([0, 3, 8, 8], dtype=np.int64)
    keys = kernels.fnv1a(np.frombuffer(b"".join(words), dtype=np.uint8), offsets)
    assert [int(k) for k in keys] == [oracles.fnv1a(w) for w in words]


def test_gemm_rows_do_not_depend_on_batch(rng):
    x, w = rng.standard_normal((9, 64)), rng.standard_normal((64, 64))
    full = kernels.gemm(x, w)
    for i in range(9):
        assert np.array_equal(kernels.gemm(x[i:i + 1], w)[0], full[i])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.sampled_from([8, 16, 32, 64, 256]), st.sampled_from([1, 8, 64, 256]),
       st.integers(0, 2**32 - 1), st.data())
def test_gemm_any_row_subset_matches(m, k, n, seed, data):
    r = np.random.default_rng(seed)
    x, w = r.standard_normal((m, k)), r.standard_normal((k, n))
    rows = data.draw(st.lists(st.integers(0, m - 1), min_size=1, max_size=m, unique=True))
    assert np.array_equal(kernels.gemm(x[rows], w), kernels.gemm(x, w)[rows])


def test_softmax_rejects_empty_axis():
    with pytest.raises(ValueError):
        kernels.softmax_rows(np.zeros((2, 0)))


def test_active_backend_follows_flag():
    assert kernels.ACTIVE.name == ("numba" if kernels.USE_NUMBA else "numpy")
