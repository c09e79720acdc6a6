import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itta import numerics as nx
from itta.alignment import (
    DecoderWeights, ReweightParams, decode_graph, decode_scores, ensemble_mean, itc_score, itm_score,
    itta_forward, reweight_descriptions, reweight_graph, reweight_weights, sigmoid,
)
from itta.encoders import features_from_cells
from itta.labels import EmbeddingCache
from itta.numerics import DimensionError, Tensor

import oracles


def unit_rows(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def small_model(rng, d=8, depth=2, k=4):
    dw = DecoderWeights.init(d, depth, rng)
    dw.b_out = np.asarray(0.3)
    for L in dw.layers:
        L.ln1_g = 1 + 0.1 * rng.standard_normal(d)
        L.ln2_b = 0.1 * rng.standard_normal(d)
    feat = features_from_cells(rng.standard_normal((k, d)))
    return dw, feat


def as_lists(dw):
    return [{k: np.asarray(v).tolist() for k, v in vars(L).items()} for L in dw.layers]


# ------------------------------------------------------------------ re-weighting


def test_two_description_softmax_example():
    rp = ReweightParams(np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]), np.asarray(0.0))
    d1, d2 = np.array([0.0, 1.0]), np.array([1.0, 0.0])
    w = reweight_weights(np.array([1.0, 0.0]), np.stack([d1, d2]), rp)
    e = math.e
    assert np.allclose(w, [1 / (1 + e), e / (1 + e)], atol=1e-15)
    assert np.allclose(w, [0.2689, 0.7311], atol=5e-5)
    out = reweight_descriptions(np.array([1.0, 0.0]), np.stack([d1, d2]), rp)
    assert np.allclose(out, w[0] * d1 + w[1] * d2, atol=1e-15)


def test_identical_rows_reproduce_the_row(rng):
    v = unit_rows(rng, 8)
    rp = ReweightParams.init(8, 5, rng)
    for tau in (1e-8, 1.0, 50.0):
        out = reweight_descriptions(rng.standard_normal(8), np.tile(v, (6, 1)), rp.with_tau(tau))
        assert np.allclose(out, v, atol=1e-15)


def test_tiny_tau_gives_ensemble_mean(rng):
    rows = unit_rows(rng, 5, 8, 16)
    rp = ReweightParams.init(16, 16, rng).with_tau(1e-8)
    for g in unit_rows(rng, 4, 16):
        assert np.max(np.abs(reweight_descriptions(g, rows, rp) - ensemble_mean(rows))) < 1e-8


def test_weights_form_a_distribution(rng):
    rp = ReweightParams.init(16, 4, rng, scale=2.0)
    w = reweight_weights(rng.standard_normal(16), unit_rows(rng, 7, 5, 16), rp)
    assert (w >= 0).all() and np.allclose(w.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3), st.floats(0.01, 2.0))
def test_raising_a_similarity_raises_its_weight(seed, j, bump):
    rng = np.random.default_rng(seed)
    g = np.array([1.0, 0.0])
    rp = ReweightParams(np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]), np.asarray(0.5))
    rows = np.column_stack([rng.standard_normal(4), np.ones(4)])
    before = reweight_weights(g, rows, rp)[j]
    rows[j, 0] += bump
    after = reweight_weights(g, rows, rp)[j]
    assert after > before


def test_reweight_needs_descriptions(rng):
    with pytest.raises(DimensionError):
        reweight_descriptions(np.ones(4), np.zeros((0, 4)), ReweightParams.init(4, 2, rng))


def test_reweight_graph_matches_array_path(rng):
    rows = unit_rows(rng, 3, 4, 8)
    globals_ = unit_rows(rng, 2, 8)
    rp = ReweightParams.init(8, 5, rng)
    got = reweight_graph(globals_, rows, rp.map(Tensor)).value
    for b in range(2):
        assert np.allclose(got[b], reweight_descriptions(globals_[b], rows, rp), atol=1e-14)


# ------------------------------------------------------------------ decoder


def test_single_key_forward_matches_oracle(rng):
    dw, _ = small_model(rng, d=8, depth=2, k=1)
    feat = features_from_cells(rng.standard_normal((1, 8)))
    q = rng.standard_normal(8)
    want = oracles.decoder_forward(feat.cells.tolist(), q.tolist(), as_lists(dw),
                                   np.asarray(dw.w_out).tolist(), float(dw.b_out))
    assert abs(decode_scores(feat, q, dw)[0] - want) < 1e-12


def test_deep_forward_matches_oracle(rng):
    dw, feat = small_model(rng, d=8, depth=12, k=4)
    q = rng.standard_normal(8)
    want = oracles.decoder_forward(feat.cells.tolist(), q.tolist(), as_lists(dw),
                                   np.asarray(dw.w_out).tolist(), float(dw.b_out))
    assert abs(itm_score(feat, q, dw) - want) < 1e-10


def test_queries_are_scored_independently(rng):
    dw, feat = small_model(rng, d=16, k=6)
    q = rng.standard_normal((5, 16))
    joint = decode_scores(feat, q, dw)
    for i in range(5):
        assert decode_scores(feat, q[i], dw)[0] == joint[i]
    assert np.array_equal(decode_scores(feat, q[[4, 1]], dw), joint[[4, 1]])


def test_zero_head_gives_half(rng):
    dw, feat = small_model(rng)
    dw.w_out, dw.b_out = np.zeros(8), np.asarray(0.0)
    logits = decode_scores(feat, rng.standard_normal((3, 8)), dw)
    assert np.array_equal(logits, np.zeros(3))
    assert np.array_equal(sigmoid(logits), np.full(3, 0.5))
    deep = DecoderWeights.init(8, 12, rng)
    deep.w_out = np.zeros(8)
    assert itm_score(feat, rng.standard_normal(8), deep) == 0.0


def test_dimension_mismatch(rng):
    dw, feat = small_model(rng)
    with pytest.raises(DimensionError):
        decode_scores(feat, np.ones((2, 5)), dw)
    with pytest.raises(DimensionError):
        itm_score(feat, np.ones((2, 8)), dw)


def test_decode_graph_matches_inference_path(rng):
    dw, feat = small_model(rng)
    cells = np.stack([feat.cells, rng.standard_normal((4, 8))])
    q = rng.standard_normal((2, 3, 8))
    got = decode_graph(cells, q, dw.map(Tensor)).value
    for b in range(2):
        assert np.allclose(got[b], decode_scores(features_from_cells(cells[b]), q[b], dw), atol=1e-12)


def test_decoder_and_reweight_gradients(rng):
    d, k = 6, 3
    dw = DecoderWeights.init(d, 2, rng).map(lambda a: Tensor(a, role="parameter"))
    rp = ReweightParams.init(d, 4, rng).map(lambda a: Tensor(a, role="parameter"))
    cells = rng.standard_normal((2, k, d))
    globals_ = unit_rows(rng, 2, d)
    rows = unit_rows(rng, 2, 3, d)

    def f():
        q = reweight_graph(globals_, rows, rp)
        return nx.mean(nx.sigmoid(decode_graph(cells, q, dw)))

    params = list(dw.named().values()) + list(rp.named().values())
    assert nx.grad_check(f, params) < 1e-5


# ------------------------------------------------------------------ paradigms


def test_itc_examples(rng):
    v = unit_rows(rng, 8)
    assert itc_score(v, v) == pytest.approx(1.0, abs=1e-15)
    assert itc_score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    a, b = unit_rows(rng, 2, 8)
    assert abs(itc_score(a, b) - sum(x * y for x, y in zip(a, b))) < 1e-12
    with pytest.raises(ValueError):
        itc_score(np.zeros(3), np.ones(3))


def test_itm_equals_decoder_at_same_depth(rng):
    dw, feat = small_model(rng)
    q = rng.standard_normal((4, 8))
    batched = decode_scores(feat, q, dw)
    assert [itm_score(feat, r, dw) for r in q] == list(batched)


def _cache(rng, n, D, d):
    return EmbeddingCache(unit_rows(rng, n, D, d), [f"t{i}" for i in range(n)])


def test_itta_forward_composes_reweighting_and_decoder(rng):
    dw, feat = small_model(rng)
    cache = _cache(rng, 2, 3, 8)
    rp = ReweightParams.init(8, 4, rng)
    text = unit_rows(rng, 1, 8)
    got = itta_forward([feat], text, cache, rp, dw)
    q = [reweight_descriptions(feat.global_, cache.rows[i], rp) for i in range(2)] + [text[0]]
    want = sigmoid([decode_scores(feat, qi, dw)[0] for qi in q])
    assert got.shape == (1, 3)
    assert np.allclose(got[0], want, atol=1e-15)


def test_itta_forward_branch_degeneration_and_permutation(rng):
    dw, feat = small_model(rng)
    feats = [feat, features_from_cells(rng.standard_normal((4, 8)))]
    cache = _cache(rng, 4, 3, 8)
    rp = ReweightParams.init(8, 4, rng)
    texts = unit_rows(rng, 2, 8)
    full = itta_forward(feats, texts, cache, rp, dw)
    assert np.array_equal(itta_forward(feats, np.zeros((0, 8)), cache, rp, dw), full[:, :4])
    assert np.array_equal(itta_forward(feats, texts, cache, rp, dw, tag_ids=[]), full[:, 4:])
    perm = [2, 0, 3, 1]
    assert np.array_equal(itta_forward(feats, texts, cache, rp, dw, tag_ids=perm)[:, :4], full[:, perm])
    assert ((full > 0) & (full < 1)).all()
    with pytest.raises(KeyError):
        itta_forward(feats, texts, cache, rp, dw, tag_ids=[7])
