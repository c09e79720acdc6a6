import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itta import numerics as nx
from itta.losses import AslConfig, TAG_ASL, asl, batch_contrastive, bce
from itta.numerics import DimensionError, Tensor

import oracles


def test_asl_negative_example():
    # p = 0.3, margin 0.05 -> shifted 0.25; 0.25^4 * -ln(0.75)
    got = float(asl(np.array([0.3]), np.array([0.0]), TAG_ASL)[0])
    assert got == pytest.approx(0.25 ** 4 * -math.log(0.75), rel=1e-12)
    assert got == pytest.approx(0.0011238, abs=5e-8)


def test_bce_example():
    assert float(bce(np.array([0.9]), np.array([0.0]))[0]) == pytest.approx(2.302585, abs=1e-6)


def test_asl_matches_oracle_grid():
    cfg = AslConfig(1.0, 3.0, 0.1)
    ps = np.linspace(0.01, 0.99, 23)
    for y in (0.0, 1.0):
        got = asl(ps, np.full_like(ps, y), cfg)
        want = [oracles.asl_term(p, y, 1.0, 3.0, 0.1) for p in ps]
        assert np.allclose(got, want, rtol=1e-13, atol=0)


def test_asl_reduces_to_bce():
    p = np.linspace(1e-6, 1 - 1e-6, 101)
    for y in (0.0, 1.0):
        t = np.full_like(p, y)
        assert np.max(np.abs(asl(p, t, AslConfig(0, 0, 0)) - bce(p, t))) <= 1e-12


def test_asl_negatives_below_margin_cost_nothing():
    p = np.array([0.0, 1e-9, 0.01, 0.049, 0.05])
    assert np.array_equal(asl(p, np.zeros(5), TAG_ASL), np.zeros(5))


def test_asl_config_validation():
    with pytest.raises(ValueError):
        AslConfig(-1, 0, 0)
    with pytest.raises(ValueError):
        AslConfig(0, 0, 1.0)


def test_clamped_probabilities_stay_finite():
    assert np.isfinite(asl(np.array([0.0, 1.0]), np.array([1.0, 0.0]), AslConfig(0, 0, 0))).all()
    assert np.isfinite(bce(np.array([0.0, 1.0]), np.array([1.0, 0.0]))).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 3), st.floats(0, 4), st.floats(0, 0.2))
def test_asl_gradient(seed, gp, gn, m):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((3, 4)), role="parameter")
    y = (rng.random((3, 4)) < 0.4).astype(float)
    cfg = AslConfig(gp, gn, m)
    # stay clear of the margin kink, where central differences are meaningless
    p = 1 / (1 + np.exp(-z.value))
    if np.min(np.abs(p - m)) < 1e-3:
        return
    assert nx.grad_check(lambda: nx.sum(asl(nx.sigmoid(z), y, cfg)), [z]) < 1e-5


def test_bce_gradient(rng):
    z = Tensor(rng.standard_normal(6), role="parameter")
    y = np.array([1, 0, 1, 0, 0, 1.0])
    assert nx.grad_check(lambda: nx.mean(bce(nx.sigmoid(z), y)), [z]) < 1e-6


def test_contrastive_matches_brute_force(rng):
    for B in (2, 3, 6):
        s = rng.standard_normal((B, B))
        assert batch_contrastive(s) == pytest.approx(oracles.contrastive(s.tolist()), rel=1e-12)
    s = rng.standard_normal((4, 4))
    assert batch_contrastive(s, 0.5) == pytest.approx(oracles.contrastive((s / 0.5).tolist()), rel=1e-12)


def test_contrastive_gradient_and_errors(rng):
    s = Tensor(rng.standard_normal((4, 4)), role="parameter")
    assert nx.grad_check(lambda: batch_contrastive(s, 0.7), [s]) < 1e-6
    with pytest.raises(DimensionError):
        batch_contrastive(np.ones((2, 3)))
    with pytest.raises(ValueError):
        batch_contrastive(np.ones((1, 1)))
    with pytest.raises(ValueError):
        batch_contrastive(np.ones((2, 2)), 0.0)
