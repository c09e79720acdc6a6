"""Dense float64 arrays with reverse-mode differentiation.

A :class:`Tensor` wraps an ``np.ndarray`` and remembers the operation that
produced it. Calling :meth:`Tensor.backward` on a scalar walks the recorded
graph in reverse topological order. Nodes that do not depend on any
parameter record nothing, so the same functions double as a cheap
inference path.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels

LN_EPS = 1e-5
PROB_EPS = 1e-12

ROLES = ("parameter", "intermediate", "input")


class NonFiniteError(ValueError):
    pass


class DimensionError(ValueError):
    pass


def as_array(x) -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting NaN and Inf."""
    a = np.asarray(x, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite entries in array of shape {a.shape}")
    return a


class Tensor:
    __slots__ = ("value", "grad", "role", "requires_grad", "_parents", "_backward")

    def __init__(self, value, role: str = "input"):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.value = as_array(value)
        if role == "parameter":
            # owns its storage: optimizers and grad_check write in place
            self.value = np.array(self.value, order="C")
        self.role = role
        self.requires_grad = role == "parameter"
        self.grad = np.zeros_like(self.value) if self.requires_grad else None
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, value, parents, backward):
        t = cls.__new__(cls)
        t.value = value
        t.role = "intermediate"
        t.requires_grad = any(p.requires_grad for p in parents)
        t.grad = None
        if t.requires_grad:
            t._parents = parents
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, role={self.role})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def backward(self):
        if self.value.size != 1:
            raise DimensionError(f"backward needs a scalar, got shape {self.value.shape}")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.role == "parameter":
                node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor._result(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor._result(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor._result(
        a.value * b.value, (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def exp(x) -> Tensor:
    x = _lift(x)
    y = np.exp(x.value)
    return Tensor._result(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _lift(x)
    return Tensor._result(np.log(x.value), (x,), lambda g: (g / x.value,))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    y = 1.0 / (1.0 + np.exp(-x.value))
    return Tensor._result(y, (x,), lambda g: (g * y * (1.0 - y),))


def clamp(x, lo, hi) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where the clip is active."""
    x = _lift(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return Tensor._result(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def elementwise(x, fn, dfn) -> Tensor:
    """Apply ``fn`` elementwise with derivative ``dfn`` (both on arrays)."""
    x = _lift(x)
    return Tensor._result(fn(x.value), (x,), lambda g: (g * dfn(x.value),))


# ------------------------------------------------------------------ reductions and shape


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = _lift(x)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(x.value.sum(axis=axis)), (x,), back)


def mean(x, axis=None) -> Tensor:
    x = _lift(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    return Tensor._result(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = _lift(x)
    inv = np.argsort(axes)
    return Tensor._result(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    axes = list(range(_lift(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x, shape) -> Tensor:
    x = _lift(x)
    return Tensor._result(
        np.broadcast_to(x.value, shape), (x,), lambda g: (_unbroadcast(g, x.shape),)
    )


def getitem(x, idx) -> Tensor:
    x = _lift(x)

    basic = isinstance(idx, (slice, int)) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) or i is Ellipsis for i in idx)
    )

    def back(g):
        full = np.zeros_like(x.value)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(x.value[idx], (x,), back)


def concat(parts, axis=0) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._result(
        np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back
    )


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        # fold leading axes into one gemm
        a2 = a.value.reshape(-1, a.shape[-1])
        out = np.matmul(a2, b.value).reshape(a.shape[:-1] + (b.shape[1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.value.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._result(out, (a, b), back)

    out = np.matmul(a.value, b.value)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), back)


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(x, axis=-1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = _lift(x)
    if x.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    moved = np.moveaxis(x.value, axis, -1)
    if moved.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    y_rows = kernels.softmax_rows(_rows(moved))
    y = np.moveaxis(y_rows.reshape(moved.shape), -1, axis)

    def back(g):
        gm = _rows(np.moveaxis(g, axis, -1))
        gx = kernels.softmax_bwd(y_rows, gm).reshape(moved.shape)
        return (np.moveaxis(gx, -1, axis),)

    return Tensor._result(y, (x,), back)


def layer_norm(x, gain, bias, eps=LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias shapes {gain.shape}, {bias.shape} do not match width {d}"
        )
    out, xhat, rstd = kernels.layer_norm_fwd(_rows(x.value), gain.value, bias.value, eps)

    def back(g):
        gx, gg, gb = kernels.layer_norm_bwd(_rows(g), xhat, rstd, gain.value)
        return gx.reshape(x.shape), gg, gb

    return Tensor._result(out.reshape(x.shape), (x, gain, bias), back)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _lift(x)
    rows = _rows(x.value)
    y, cdf = kernels.gelu_fwd(rows)
    return Tensor._result(
        y.reshape(x.shape), (x,), lambda g: (kernels.gelu_bwd(rows, cdf, _rows(g)).reshape(x.shape),)
    )


# ------------------------------------------------------------------ gradient checking


def grad_check(f, params, h=1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` takes no arguments and returns a scalar :class:`Tensor` computed
    from the current values of ``params``. The relative error of one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("loss is not finite")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().value)
            flat[i] = orig - h
            fm = float(f().value)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"loss not finite while perturbing entry {i}")
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
