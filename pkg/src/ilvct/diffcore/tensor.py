"""Reverse-mode autodiff over numpy arrays.

A DTensor records the operation that produced it; calling ``backward()`` on a
scalar result walks the graph in reverse topological order and accumulates
gradients into every tensor created with ``requires_grad=True``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "DTensor",
    "constant",
    "add", "sub", "mul", "div", "neg", "exp", "sqrt", "absolute",
    "tanh", "gelu", "softplus", "clip",
    "matmul", "reshape", "permute", "concat", "take_slice", "take",
    "scatter_add", "dsum", "dmean", "dmax", "softmax", "layer_norm",
    "linear", "scaled_dot_attention",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class DTensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"DTensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return DTensor(self.values.copy())

    def backward(self):
        """Backpropagate from a scalar; fills ``grad`` on reachable leaves."""
        if self.values.size != 1:
            raise ShapeError(
                f"backward() requires a scalar output, got shape {self.values.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.values)
                parent.grad += g

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None):
        return dsum(self, axis)

    def mean(self, axis=None):
        return dmean(self, axis)

    def max(self, axis):
        return dmax(self, axis)

    def item(self):
        return float(self.values.reshape(()))


def constant(values):
    return DTensor(values)


def _wrap(x):
    return x if isinstance(x, DTensor) else DTensor(x)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(values, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return DTensor(values)
    return DTensor(values, requires_grad=True, _parents=parents, _backward=backward)


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.values + b.values

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _node(out, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.values - b.values

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _node(out, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.values * b.values

    def bwd(g):
        return (_unbroadcast(g * b.values, a.shape),
                _unbroadcast(g * a.values, b.shape))

    return _node(out, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.values / b.values

    def bwd(g):
        return (_unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * a.values / (b.values ** 2), b.shape))

    return _node(out, (a, b), bwd)


def neg(a):
    a = _wrap(a)
    return _node(-a.values, (a,), lambda g: (-g,))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.values)
    return _node(out, (a,), lambda g: (g * out,))


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.values)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    a = _wrap(a)
    out = np.abs(a.values)
    sign = np.sign(a.values)
    return _node(out, (a,), lambda g: (g * sign,))


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.values)
    return _node(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def gelu(a):
    """Exact (erf-based) GELU."""
    a = _wrap(a)
    x = a.values
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x ** 2)
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), bwd)


def softplus(a):
    """Numerically stable log(1 + e^x)."""
    a = _wrap(a)
    x = a.values
    out = np.logaddexp(0.0, x)

    def bwd(g):
        return (g / (1.0 + np.exp(-x)),)

    return _node(out, (a,), bwd)


def clip(a, lo, hi):
    a = _wrap(a)
    out = np.clip(a.values, lo, hi)
    inside = ((a.values > lo) & (a.values < hi)).astype(a.values.dtype)
    return _node(out, (a,), lambda g: (g * inside,))


# -- linear algebra & shape ----------------------------------------------

def matmul(a, b):
    """Matrix product; both operands must have ndim >= 2, batch dims broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError as e:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from e

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        if ga.shape != a.shape:
            ga = _unbroadcast(ga, a.shape)
        if gb.shape != b.shape:
            gb = _unbroadcast(gb, b.shape)
        return (ga, gb)

    return _node(out, (a, b), bwd)


def reshape(a, shape):
    a = _wrap(a)
    out = a.values.reshape(shape)
    orig = a.shape
    return _node(out, (a,), lambda g: (g.reshape(orig),))


def permute(a, axes):
    a = _wrap(a)
    out = np.transpose(a.values, axes)
    inv = np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), bwd)


def take_slice(a, key):
    a = _wrap(a)
    out = a.values[key]
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return _node(out, (a,), bwd)


def take(a, index, axis=0):
    """Gather rows along ``axis`` by an integer index array."""
    a = _wrap(a)
    index = np.asarray(index)
    out = np.take(a.values, index, axis=axis)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = (slice(None),) * axis
        np.add.at(full, sl + (index,), g)
        return (full,)

    return _node(out, (a,), bwd)


def scatter_add(src, index, size):
    """out[i] = sum of src rows j with index[j] == i; out has leading dim ``size``."""
    src = _wrap(src)
    index = np.asarray(index)
    out = np.zeros((size,) + src.shape[1:], dtype=src.values.dtype)
    np.add.at(out, index, src.values)
    return _node(out, (src,), lambda g: (g[index],))


# -- reductions ----------------------------------------------------------

def dsum(a, axis=None):
    a = _wrap(a)
    out = a.values.sum(axis=axis)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), bwd)


def dmean(a, axis=None):
    a = _wrap(a)
    out = a.values.mean(axis=axis)
    shape = a.shape
    n = a.values.size if axis is None else shape[axis]

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _node(out, (a,), bwd)


def dmax(a, axis):
    """Max over one axis; gradient flows to the first argmax."""
    a = _wrap(a)
    out = a.values.max(axis=axis)
    idx = a.values.argmax(axis=axis)

    def bwd(g):
        full = np.zeros_like(a.values)
        gi = np.expand_dims(idx, axis)
        np.put_along_axis(full, gi, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), bwd)


# -- fused neural ops ----------------------------------------------------

def softmax(a):
    """Softmax over the last axis."""
    a = _wrap(a)
    x = a.values
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis with affine parameters."""
    a, gamma, beta = _wrap(a), _wrap(gamma), _wrap(beta)
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.values + beta.values
    n = x.shape[-1]

    def bwd(g):
        gg = g * gamma.values
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        return (gx, ggamma, gbeta)

    return _node(out, (a, gamma, beta), bwd)


def linear(x, w, b=None):
    """x @ w (+ b). ``w`` has shape (in_features, out_features)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def scaled_dot_attention(q, k, v):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; batched over the rest."""
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"attention dim mismatch: Q {q.shape} vs K {k.shape}")
    kt = permute(k, tuple(range(k.values.ndim - 2)) + (k.values.ndim - 1, k.values.ndim - 2))
    scores = mul(matmul(q, kt), 1.0 / np.sqrt(d))
    return matmul(softmax(scores), v)
