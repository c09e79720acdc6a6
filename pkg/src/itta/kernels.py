"""Row-wise numeric kernels with a numba path and a pure-numpy fallback.

Set ``ITTA_DISABLE_NUMBA=1`` to force the numpy implementations. Both
backends stay importable through :data:`BACKENDS` so they can be compared
side by side (see ``benchmarks/kernel_backends.py``).

Every kernel treats rows independently with a fixed reduction order, so a
row's result never depends on how many other rows share the call.
"""
import math
import os

import numpy as np
from scipy.special import erf as _np_erf

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

DISABLED = os.environ.get("ITTA_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = numba is not None and not DISABLED

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


GEMM_BLOCK = 16


def gemm(x, w):
    """``x @ w`` whose rows do not depend on how many rows come along.

    BLAS picks kernels (gemv, tail micro-kernels, small-matrix paths) from the
    row count, and they round differently. Rows therefore always go through
    as zero-padded blocks of ``GEMM_BLOCK``; a stacked matmul issues one
    same-shaped gemm per block.
    """
    if x.ndim != 2:
        return np.matmul(x, w)
    m, k = x.shape
    nb = -(-m // GEMM_BLOCK)
    if nb * GEMM_BLOCK == m:
        xb = x.reshape(nb, GEMM_BLOCK, k)
    else:
        xb = np.zeros((nb * GEMM_BLOCK, k), dtype=x.dtype)
        xb[:m] = x
        xb = xb.reshape(nb, GEMM_BLOCK, k)
    return np.matmul(xb, w).reshape(nb * GEMM_BLOCK, -1)[:m]


# ---------------------------------------------------------------- numpy path


def _np_layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _np_layer_norm_bwd(gout, xhat, rstd, gain):
    gx_hat = gout * gain
    d = xhat.shape[1]
    a = gx_hat.sum(axis=1, keepdims=True) / d
    b = (gx_hat * xhat).sum(axis=1, keepdims=True) / d
    gx = rstd[:, None] * (gx_hat - a - xhat * b)
    return gx, (gout * xhat).sum(axis=0), gout.sum(axis=0)


def _np_gelu_fwd(x):
    cdf = 0.5 * (1.0 + _np_erf(x * _INV_SQRT2))
    return x * cdf, cdf


def _np_gelu_bwd(x, cdf, g):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def _np_softmax_rows(x):
    if x.shape[1] == 0:
        raise ValueError("softmax over an empty axis")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _np_row_dots(a, v):
    return (a * v).sum(axis=1)


def _np_weighted_rows(w, rows):
    # w: (n, D), rows: (n, D, d); accumulate in ascending j
    out = w[:, 0, None] * rows[:, 0, :]
    for j in range(1, w.shape[1]):
        out = out + w[:, j, None] * rows[:, j, :]
    return out


def _np_fnv1a(buf, offsets):
    n = offsets.shape[0] - 1
    out = np.empty(n, dtype=np.uint64)
    mask = 0xFFFFFFFFFFFFFFFF
    raw = buf.tobytes()
    for i in range(n):
        h = int(_FNV_OFFSET)
        for byte in raw[offsets[i]:offsets[i + 1]]:
            h = ((h ^ byte) * int(_FNV_PRIME)) & mask
        out[i] = h
    return out


def _np_splitmix(z):
    z = z ^ (z >> np.uint64(30))
    z = z * _MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _MIX2
    return z ^ (z >> np.uint64(31))


def _np_hash_uniform(keys, seed, d):
    with np.errstate(over="ignore"):
        state = _np_splitmix(keys.astype(np.uint64) ^ np.uint64(seed))
        steps = (np.arange(1, d + 1, dtype=np.uint64) * _GOLDEN)
        z = _np_splitmix(state[:, None] + steps[None, :])
    u = (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return 2.0 * u - 1.0


def _np_ap_sorted(labels):
    hits = np.cumsum(labels)
    npos = int(hits[-1]) if labels.shape[0] else 0
    if npos == 0:
        return math.nan
    ranks = np.arange(1, labels.shape[0] + 1, dtype=np.float64)
    prec = hits[labels > 0].astype(np.float64) / ranks[labels > 0]
    return float(np.cumsum(prec)[-1] / npos)


def _np_histogram(scores, nbins):
    idx = np.floor(scores * nbins).astype(np.int64)
    idx = np.clip(idx, 0, nbins - 1)
    return np.bincount(idx, minlength=nbins).astype(np.int64)


# ---------------------------------------------------------------- numba path

if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _nb_layer_norm_fwd(x, gain, bias, eps):
        n, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            m = 0.0
            for j in range(d):
                m += x[i, j]
            m /= d
            v = 0.0
            for j in range(d):
                c = x[i, j] - m
                v += c * c
            r = 1.0 / math.sqrt(v / d + eps)
            rstd[i] = r
            for j in range(d):
                xh = (x[i, j] - m) * r
                xhat[i, j] = xh
                out[i, j] = xh * gain[j] + bias[j]
        return out, xhat, rstd

    @_jit
    def _nb_layer_norm_bwd(gout, xhat, rstd, gain):
        n, d = gout.shape
        gx = np.empty_like(gout)
        ggain = np.zeros(d)
        gbias = np.zeros(d)
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(d):
                gh = gout[i, j] * gain[j]
                a += gh
                b += gh * xhat[i, j]
            a /= d
            b /= d
            for j in range(d):
                gh = gout[i, j] * gain[j]
                gx[i, j] = rstd[i] * (gh - a - xhat[i, j] * b)
                ggain[j] += gout[i, j] * xhat[i, j]
                gbias[j] += gout[i, j]
        return gx, ggain, gbias

    @_jit
    def _nb_gelu_fwd(x):
        n, d = x.shape
        out = np.empty_like(x)
        cdf = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                c = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
                cdf[i, j] = c
                out[i, j] = v * c
        return out, cdf

    @_jit
    def _nb_gelu_bwd(x, cdf, g):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
                out[i, j] = g[i, j] * (cdf[i, j] + v * pdf)
        return out

    @_jit
    def _nb_softmax_core(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(d):
                out[i, j] /= s
        return out

    def _nb_softmax_rows(x):
        if x.shape[1] == 0:
            raise ValueError("softmax over an empty axis")
        return _nb_softmax_core(x)

    @_jit
    def _nb_softmax_bwd(y, g):
        n, d = y.shape
        out = np.empty_like(y)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += g[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = y[i, j] * (g[i, j] - s)
        return out

    @_jit
    def _nb_row_dots(a, v):
        n, d = a.shape
        out = np.empty(n)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += a[i, j] * v[j]
            out[i] = s
        return out

    @_jit
    def _nb_weighted_rows(w, rows):
        n, D, d = rows.shape
        out = np.empty((n, d))
        for i in range(n):
            for k in range(d):
                out[i, k] = w[i, 0] * rows[i, 0, k]
            for j in range(1, D):
                for k in range(d):
                    out[i, k] = out[i, k] + w[i, j] * rows[i, j, k]
        return out

    @_jit
    def _nb_fnv1a(buf, offsets):
        n = offsets.shape[0] - 1
        out = np.empty(n, dtype=np.uint64)
        for i in range(n):
            h = _FNV_OFFSET
            for p in range(offsets[i], offsets[i + 1]):
                h = (h ^ np.uint64(buf[p])) * _FNV_PRIME
            out[i] = h
        return out

    @_jit
    def _nb_splitmix(z):
        z = z ^ (z >> np.uint64(30))
        z = z * _MIX1
        z = z ^ (z >> np.uint64(27))
        z = z * _MIX2
        return z ^ (z >> np.uint64(31))

    @_jit
    def _nb_hash_uniform(keys, seed, d):
        n = keys.shape[0]
        out = np.empty((n, d))
        for i in range(n):
            state = _nb_splitmix(keys[i] ^ seed)
            for j in range(d):
                z = _nb_splitmix(state + np.uint64(j + 1) * _GOLDEN)
                u = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
                out[i, j] = 2.0 * u - 1.0
        return out

    @_jit
    def _nb_ap_core(labels):
        hits = 0
        s = 0.0
        for r in range(labels.shape[0]):
            if labels[r] > 0:
                hits += 1
                s += hits / (r + 1.0)
        if hits == 0:
            return np.nan
        return s / hits

    def _nb_ap_sorted(labels):
        return float(_nb_ap_core(labels))

    @_jit
    def _nb_histogram(scores, nbins):
        out = np.zeros(nbins, dtype=np.int64)
        for i in range(scores.shape[0]):
            b = int(math.floor(scores[i] * nbins))
            if b < 0:
                b = 0
            elif b >= nbins:
                b = nbins - 1
            out[b] += 1
        return out


_NAMES = (
    "layer_norm_fwd", "layer_norm_bwd", "gelu_fwd", "gelu_bwd", "softmax_rows",
    "softmax_bwd", "row_dots", "weighted_rows", "fnv1a", "hash_uniform",
    "ap_sorted", "histogram",
)


class _Backend:
    def __init__(self, name, prefix):
        self.name = name
        for fn in _NAMES:
            setattr(self, fn, globals()[prefix + fn])

    def __repr__(self):
        return f"<kernel backend {self.name}>"


BACKENDS = {"numpy": _Backend("numpy", "_np_")}
if numba is not None:
    BACKENDS["numba"] = _Backend("numba", "_nb_")

ACTIVE = BACKENDS["numba" if USE_NUMBA else "numpy"]

layer_norm_fwd = ACTIVE.layer_norm_fwd
layer_norm_bwd = ACTIVE.layer_norm_bwd
gelu_fwd = ACTIVE.gelu_fwd
gelu_bwd = ACTIVE.gelu_bwd
softmax_rows = ACTIVE.softmax_rows
softmax_bwd = ACTIVE.softmax_bwd
row_dots = ACTIVE.row_dots
weighted_rows = ACTIVE.weighted_rows
fnv1a = ACTIVE.fnv1a
hash_uniform = ACTIVE.hash_uniform
ap_sorted = ACTIVE.ap_sorted
histogram = ACTIVE.histogram
