"""Description re-weighting, the shared cross-attention alignment decoder,
and the three alignment paradigms (ITC, ITM, ITTA).

Scoring functions work on plain arrays and are what evaluation and the
benchmarks call. The ``*_graph`` twins build the same computation out of
:mod:`itta.numerics` tensors for training and gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from . import numerics as nx
from .encoders import SpatialFeatures
from .numerics import DimensionError, Tensor

INIT_LOG_TAU = math.log(10.0)
TAU_FLOOR = 1e-8
DEFAULT_DEPTH = 2
ITM_DEPTH = 12


@dataclass
class LayerWeights:
    wq: object
    wk: object
    wv: object
    wo: object
    w1: object
    w2: object
    ln1_g: object
    ln1_b: object
    ln2_g: object
    ln2_b: object

    def map(self, fn):
        return LayerWeights(**{f.name: fn(getattr(self, f.name)) for f in fields(self)})


@dataclass
class DecoderWeights:
    """Decoder parameters. Fields hold arrays, or tensors while training."""

    layers: list
    w_out: object
    b_out: object

    @property
    def depth(self):
        return len(self.layers)

    @property
    def dim(self):
        return _val(self.w_out).shape[0]

    def map(self, fn):
        return DecoderWeights([l.map(fn) for l in self.layers], fn(self.w_out), fn(self.b_out))

    def named(self, prefix="dec"):
        out = {}
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                out[f"{prefix}.l{i}.{f.name}"] = getattr(layer, f.name)
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out

    @classmethod
    def from_named(cls, named, prefix="dec"):
        depth = 0
        while f"{prefix}.l{depth}.wq" in named:
            depth += 1
        if depth == 0:
            raise KeyError(f"no decoder layers under {prefix!r}")
        layers = [
            LayerWeights(**{f.name: named[f"{prefix}.l{i}.{f.name}"] for f in fields(LayerWeights)})
            for i in range(depth)
        ]
        return cls(layers, named[f"{prefix}.w_out"], named[f"{prefix}.b_out"])

    @classmethod
    def init(cls, dim, depth=DEFAULT_DEPTH, rng=None):
        rng = np.random.default_rng(rng)
        s = 1.0 / math.sqrt(dim)
        layers = []
        for _ in range(depth):
            layers.append(LayerWeights(
                wq=rng.normal(0, s, (dim, dim)), wk=rng.normal(0, s, (dim, dim)),
                wv=rng.normal(0, s, (dim, dim)), wo=rng.normal(0, s, (dim, dim)),
                w1=rng.normal(0, s, (dim, 4 * dim)), w2=rng.normal(0, s / 2, (4 * dim, dim)),
                ln1_g=np.ones(dim), ln1_b=np.zeros(dim), ln2_g=np.ones(dim), ln2_b=np.zeros(dim),
            ))
        return cls(layers, rng.normal(0, s, dim), np.zeros(()))


@dataclass
class ReweightParams:
    g_v: object      # (d, p)
    g_w: object      # (d, p)
    log_tau: object  # scalar

    @property
    def tau(self) -> float:
        return max(math.exp(float(_val(self.log_tau))), TAU_FLOOR)

    def map(self, fn):
        return ReweightParams(fn(self.g_v), fn(self.g_w), fn(self.log_tau))

    def named(self, prefix="rw"):
        return {f"{prefix}.g_v": self.g_v, f"{prefix}.g_w": self.g_w, f"{prefix}.log_tau": self.log_tau}

    @classmethod
    def from_named(cls, named, prefix="rw"):
        return cls(named[f"{prefix}.g_v"], named[f"{prefix}.g_w"], named[f"{prefix}.log_tau"])

    @classmethod
    def init(cls, dim, proj_dim=None, rng=None, scale=1.0):
        rng = np.random.default_rng(rng)
        p = proj_dim or dim
        s = scale / math.sqrt(dim)
        return cls(rng.normal(0, s, (dim, p)), rng.normal(0, s, (dim, p)), np.asarray(INIT_LOG_TAU))

    def with_tau(self, tau):
        return ReweightParams(self.g_v, self.g_w, np.asarray(math.log(tau)))


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


# ------------------------------------------------------------------ re-weighting


def reweight_weights(global_, desc, rp: ReweightParams) -> np.ndarray:
    """Softmax weights over each tag's descriptions for one image.

    ``desc`` is ``(D, d)`` for one tag or ``(N, D, d)`` for many.
    """
    rows = np.asarray(desc, dtype=np.float64)
    single = rows.ndim == 2
    if single:
        rows = rows[None]
    n, D, d = rows.shape
    if D == 0:
        raise DimensionError("re-weighting needs at least one description")
    gv = kernels.gemm(np.asarray(global_, dtype=np.float64).reshape(1, d), rp.g_v)[0]
    gw = kernels.gemm(rows.reshape(n * D, d), rp.g_w)
    sims = kernels.row_dots(np.ascontiguousarray(gw), gv).reshape(n, D)
    w = kernels.softmax_rows(rp.tau * sims)
    return w[0] if single else w


def reweight_descriptions(global_, desc, rp: ReweightParams) -> np.ndarray:
    """Image-conditioned fusion of description embeddings.

    The softmax-weighted sum runs over the raw description embeddings;
    the projectors only shape the weights.
    """
    rows = np.asarray(desc, dtype=np.float64)
    single = rows.ndim == 2
    if single:
        rows = rows[None]
    w = reweight_weights(global_, rows, rp)
    fused = kernels.weighted_rows(w, np.ascontiguousarray(rows))
    return fused[0] if single else fused


def ensemble_mean(desc) -> np.ndarray:
    """Uniform average of description embeddings (prompt ensemble)."""
    rows = np.ascontiguousarray(desc, dtype=np.float64)
    single = rows.ndim == 2
    if single:
        rows = rows[None]
    n, D, _ = rows.shape
    if D == 0:
        raise DimensionError("ensemble needs at least one description")
    fused = kernels.weighted_rows(np.full((n, D), 1.0 / D), rows)
    return fused[0] if single else fused


def fuse_queries(global_, rows, rp: ReweightParams | None) -> np.ndarray:
    if rp is None:
        return ensemble_mean(rows)
    return reweight_descriptions(global_, rows, rp)


# ------------------------------------------------------------------ decoder


def _check_dims(cells, queries, dw):
    d = dw.dim
    if cells.ndim != 2 or cells.shape[1] != d:
        raise DimensionError(f"image cells {cells.shape} do not match decoder width {d}")
    if queries.ndim != 2 or queries.shape[1] != d:
        raise DimensionError(f"queries {queries.shape} do not match decoder width {d}")


def decode_scores(feat: SpatialFeatures, queries, dw: DecoderWeights) -> np.ndarray:
    """Alignment logits, one per query row.

    Every query runs through the layers on its own: pre-norm single-head
    cross-attention over the image cells, then a GELU feed-forward, each with
    a residual add. There is no attention between queries.
    """
    cells = feat.cells
    h = np.array(queries, dtype=np.float64, ndmin=2)
    _check_dims(cells, h, dw)
    if h.shape[0] == 0:
        return np.zeros(0)
    scale = 1.0 / math.sqrt(dw.dim)
    for L in dw.layers:
        keys = kernels.gemm(cells, L.wk)
        vals = kernels.gemm(cells, L.wv)
        z, _, _ = kernels.layer_norm_fwd(h, L.ln1_g, L.ln1_b, nx.LN_EPS)
        att = kernels.softmax_rows(kernels.gemm(kernels.gemm(z, L.wq), keys.T) * scale)
        h = h + kernels.gemm(kernels.gemm(att, vals), L.wo)
        z, _, _ = kernels.layer_norm_fwd(h, L.ln2_g, L.ln2_b, nx.LN_EPS)
        h = h + kernels.gemm(kernels.gelu_fwd(kernels.gemm(z, L.w1))[0], L.w2)
    return kernels.row_dots(h, dw.w_out) + float(dw.b_out)


def decode_graph(cells, queries, dw: DecoderWeights) -> Tensor:
    """Differentiable decoder over a batch: cells ``(B,k,d)``, queries ``(B,Q,d)``."""
    cells = nx._lift(cells)
    h = nx._lift(queries)
    d = dw.dim
    if cells.shape[-1] != d or h.shape[-1] != d:
        raise DimensionError(f"cells {cells.shape} / queries {h.shape} do not match width {d}")
    scale = 1.0 / math.sqrt(d)
    for L in dw.layers:
        keys = nx.matmul(cells, L.wk)
        vals = nx.matmul(cells, L.wv)
        z = nx.layer_norm(h, L.ln1_g, L.ln1_b)
        att = nx.softmax(nx.matmul(nx.matmul(z, L.wq), nx.swap_last(keys)) * scale, axis=-1)
        h = h + nx.matmul(nx.matmul(att, vals), L.wo)
        z = nx.layer_norm(h, L.ln2_g, L.ln2_b)
        h = h + nx.matmul(nx.gelu(nx.matmul(z, L.w1)), L.w2)
    logits = nx.matmul(h, nx.reshape(dw.w_out, (d, 1)))
    return nx.reshape(logits, h.shape[:-1]) + dw.b_out


def reweight_graph(globals_, rows, rp: ReweightParams) -> Tensor:
    """Differentiable fused tag queries ``(B, N, d)`` from globals ``(B,d)``
    and frozen description rows ``(N, D, d)``."""
    g = nx._lift(globals_)
    rows = np.asarray(rows, dtype=np.float64)
    n, D, d = rows.shape
    B = g.shape[0]
    gv = nx.matmul(g, rp.g_v)                                   # (B, p)
    gw = nx.matmul(rows.reshape(n * D, d), rp.g_w)              # (N*D, p)
    sims = nx.matmul(gw, nx.swap_last(gv))                      # (N*D, B)
    sims = nx.transpose(nx.reshape(sims, (n, D, B)), (2, 0, 1))  # (B, N, D)
    tau = nx.clamp(nx.exp(rp.log_tau), TAU_FLOOR, math.inf)
    w = nx.softmax(sims * tau, axis=-1)
    fused = nx.matmul(nx.reshape(w, (B, n, 1, D)), rows)         # (B, N, 1, d)
    return nx.reshape(fused, (B, n, d))


# ------------------------------------------------------------------ paradigms


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def itc_score(img_global, txt) -> float:
    """Cosine similarity between a global image feature and a text embedding."""
    a = np.asarray(img_global, dtype=np.float64)
    b = np.asarray(txt, dtype=np.float64)
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return min(1.0, max(-1.0, float(a @ b) / (na * nb)))


def itm_score(feat: SpatialFeatures, query, deep: DecoderWeights) -> float:
    """Deep matching logit for exactly one (image, query) pair."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise DimensionError(f"ITM scores one query at a time, got shape {q.shape}")
    return float(decode_scores(feat, q[None, :], deep)[0])


def itta_forward(batch_feats, online_texts, cache, rp, dw, tag_ids=None, reweight=True) -> np.ndarray:
    """Alignment probabilities ``(B, N + T)``: tag columns first, then texts.

    Tag queries are fused per image from the cached description rows
    (re-weighted when ``reweight`` and ``rp`` is given, uniform otherwise);
    text queries are the online text embeddings as given.
    """
    d = dw.dim
    texts = np.asarray(online_texts, dtype=np.float64).reshape(-1, d)
    tag_ids = list(cache.tag_ids if tag_ids is None else tag_ids)
    rows = cache.rows_for(tag_ids) if tag_ids else np.zeros((0, 1, d))
    use_rp = rp if reweight else None
    out = np.empty((len(batch_feats), len(tag_ids) + texts.shape[0]))
    for b, feat in enumerate(batch_feats):
        tq = fuse_queries(feat.global_, rows, use_rp) if tag_ids else np.zeros((0, d))
        out[b] = sigmoid(decode_scores(feat, np.concatenate([tq, texts]), dw))
    return out
