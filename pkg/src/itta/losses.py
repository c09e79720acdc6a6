"""Alignment losses: ASL, BCE and the symmetric in-batch contrastive CE.

Each loss accepts plain arrays (returns an array) or a :class:`Tensor`
(returns a differentiable tensor). Probabilities are clamped to
``[1e-12, 1 - 1e-12]`` first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import PROB_EPS, Tensor


@dataclass(frozen=True)
class AslConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("ASL focusing exponents must be >= 0")
        if not 0 <= self.margin < 1:
            raise ValueError("ASL margin must lie in [0, 1)")


TAG_ASL = AslConfig(0.0, 4.0, 0.05)
TEXT_ASL = AslConfig(0.0, 1.0, 0.0)


def _asl_terms(p, y, cfg):
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = (1.0 - p) ** cfg.gamma_pos * -np.log(p)
    pm = np.maximum(p - cfg.margin, 0.0)
    neg = pm ** cfg.gamma_neg * -np.log1p(-pm)
    return np.where(y > 0, pos, neg)


def _asl_dp(p, y, cfg):
    inside = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    gp, gn = cfg.gamma_pos, cfg.gamma_neg
    nlogp = -np.log(p)
    dpos = -(1.0 - p) ** gp / p
    if gp > 0:
        dpos = dpos - gp * (1.0 - p) ** (gp - 1.0) * nlogp
    pm = np.maximum(p - cfg.margin, 0.0)
    active = pm > 0
    safe = np.where(active, pm, 0.5)
    dneg = safe ** gn / (1.0 - safe)
    if gn > 0:
        dneg = dneg + gn * safe ** (gn - 1.0) * -np.log1p(-safe)
    dneg = np.where(active, dneg, 0.0)
    return np.where(y > 0, dpos, dneg) * inside


def asl(p, y, cfg: AslConfig = TAG_ASL):
    """Elementwise asymmetric loss.

    Positives: ``(1-p)^gamma_pos * -log p``. Negatives use the shifted
    probability ``p_m = max(p - margin, 0)``: ``p_m^gamma_neg * -log(1-p_m)``,
    so negatives with ``p <= margin`` cost nothing.
    """
    y = np.asarray(y, dtype=np.float64)
    if isinstance(p, Tensor):
        return nx.elementwise(p, lambda v: _asl_terms(v, y, cfg), lambda v: _asl_dp(v, y, cfg))
    return _asl_terms(np.asarray(p, dtype=np.float64), y, cfg)


def _bce_terms(p, y):
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def _bce_dp(p, y):
    inside = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return (-y / p + (1.0 - y) / (1.0 - p)) * inside


def bce(p, y):
    y = np.asarray(y, dtype=np.float64)
    if isinstance(p, Tensor):
        return nx.elementwise(p, lambda v: _bce_terms(v, y), lambda v: _bce_dp(v, y))
    return _bce_terms(np.asarray(p, dtype=np.float64), y)


def _log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def _contrastive(logits):
    B = logits.shape[0]
    diag = np.arange(B)
    row = -_log_softmax_rows(logits)[diag, diag].mean()
    col = -_log_softmax_rows(logits.T)[diag, diag].mean()
    return 0.5 * (row + col)


def batch_contrastive(sim, temperature: float = 1.0):
    """Symmetric cross-entropy over a square similarity matrix whose
    diagonal holds the matched pairs."""
    s = sim.value if isinstance(sim, Tensor) else np.asarray(sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise nx.DimensionError(f"contrastive loss needs a square matrix, got {s.shape}")
    B = s.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs at least two pairs")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = s / temperature
    value = np.asarray(_contrastive(logits))
    if not isinstance(sim, Tensor):
        return float(value)

    def back(g):
        eye = np.eye(B)
        row = np.exp(_log_softmax_rows(logits)) - eye
        col = (np.exp(_log_softmax_rows(logits.T)) - eye).T
        return (g * (row + col) / (2.0 * B * temperature),)

    return Tensor._result(value, (sim,), back)
