"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was produced, so the
gradient of a scalar objective with respect to every leaf can be pulled back
through the expression graph with :func:`backward`. The free functions in this
module (``sin``, ``matmul``, ``where``, ...) dispatch on their argument type:
given plain ndarrays they fall through to numpy, given Tensors they record the
operation. Numerical code elsewhere in the package is therefore written once
and runs both as a plain value computation and as a differentiable one.

All arrays are float64. Reduction order is fixed by numpy semantics, so a
computation is bit-reproducible for identical inputs regardless of worker
counts.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "astensor",
    "value_of",
    "backward",
    "matmul",
    "transpose_last2",
    "swapaxes",
    "reshape",
    "concatenate",
    "stack",
    "tsum",
    "tmean",
    "sin",
    "cos",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "atan2",
    "where",
    "clip",
]


_F64 = np.dtype(np.float64)


def _accumulate(node, g):
    # grads are never mutated in place, so aliasing a view here is safe
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Node of the reverse-mode graph: a value plus a pullback closure."""

    __slots__ = ("value", "grad", "parents", "pullback")

    # keep numpy from consuming Tensors in mixed expressions; the reflected
    # operators below take over instead
    __array_ufunc__ = None

    def __init__(self, value, parents=(), pullback=None):
        if type(value) is not np.ndarray or value.dtype != _F64:
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.grad = None
        self.parents = parents
        self.pullback = pullback

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, leaf={self.pullback is None})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        a, b = self, astensor(other)
        out = Tensor(a.value + b.value, (a, b))

        def pull(g):
            _accumulate(a, _unbroadcast(g, a.value.shape))
            _accumulate(b, _unbroadcast(g, b.value.shape))

        out.pullback = pull
        return out

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, astensor(other)
        out = Tensor(a.value - b.value, (a, b))

        def pull(g):
            _accumulate(a, _unbroadcast(g, a.value.shape))
            _accumulate(b, _unbroadcast(-g, b.value.shape))

        out.pullback = pull
        return out

    def __rsub__(self, other):
        return astensor(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, astensor(other)
        out = Tensor(a.value * b.value, (a, b))

        def pull(g):
            _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
            _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

        out.pullback = pull
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, astensor(other)
        out = Tensor(a.value / b.value, (a, b))

        def pull(g):
            _accumulate(a, _unbroadcast(g / b.value, a.value.shape))
            _accumulate(b, _unbroadcast(-g * out.value / b.value, b.value.shape))

        out.pullback = pull
        return out

    def __rtruediv__(self, other):
        return astensor(other).__truediv__(self)

    def __neg__(self):
        a = self
        out = Tensor(-a.value, (a,))
        out.pullback = lambda g: _accumulate(a, -g)
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self
        out = Tensor(a.value**exponent, (a,))

        def pull(g):
            _accumulate(a, g * exponent * a.value ** (exponent - 1))

        out.pullback = pull
        return out

    def __matmul__(self, other):
        return matmul(self, astensor(other))

    def __rmatmul__(self, other):
        return matmul(astensor(other), self)

    def __getitem__(self, idx):
        a = self
        out = Tensor(a.value[idx], (a,))

        def pull(g):
            buf = np.zeros_like(a.value)
            if _is_basic_index(idx):
                buf[idx] += g
            else:
                np.add.at(buf, idx, g)
            _accumulate(a, buf)

        out.pullback = pull
        return out


def _is_basic_index(idx):
    if isinstance(idx, (int, slice)) or idx is Ellipsis or idx is None:
        return True
    if isinstance(idx, tuple):
        return all(
            isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in idx
        )
    return False


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def value_of(x):
    """Underlying ndarray of either a Tensor or an array-like."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _any_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def backward(root, seed=None):
    """Backpropagate from ``root``; leaf gradients land in ``.grad``.

    ``seed`` is the incoming adjoint (defaults to ones, i.e. d root / d root).
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward() needs a Tensor root")
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    if seed is None:
        seed = np.ones_like(root.value)
    root.grad = np.asarray(seed, dtype=np.float64)
    for node in reversed(order):
        if node.pullback is not None and node.grad is not None:
            node.pullback(node.grad)


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    if not _any_tensor(a, b):
        return np.matmul(a, b)
    a, b = astensor(a), astensor(b)
    out = Tensor(np.matmul(a.value, b.value), (a, b))

    def pull(g):
        if b.value.ndim == 1:
            # (..., n, k) @ (k,): matrix-vector
            ga = g[..., :, None] * b.value
            gb = np.einsum("...nk,...n->k", a.value, g)
        elif a.value.ndim == 1:
            ga = np.einsum("...km,...m->k", b.value, g)
            gb = a.value[..., :, None] * g[..., None, :]
        else:
            ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
            gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.value.shape))
        _accumulate(b, _unbroadcast(gb, b.value.shape))

    out.pullback = pull
    return out


def swapaxes(x, axis1, axis2):
    if not isinstance(x, Tensor):
        return np.swapaxes(x, axis1, axis2)
    out = Tensor(np.swapaxes(x.value, axis1, axis2), (x,))
    out.pullback = lambda g: _accumulate(x, np.swapaxes(g, axis1, axis2))
    return out


def transpose_last2(x):
    return swapaxes(x, -1, -2)


def reshape(x, shape):
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    out = Tensor(np.reshape(x.value, shape), (x,))
    out.pullback = lambda g: _accumulate(x, np.reshape(g, x.value.shape))
    return out


def concatenate(xs, axis=0):
    if not _any_tensor(*xs):
        return np.concatenate(xs, axis=axis)
    ts = [astensor(x) for x in xs]
    out = Tensor(np.concatenate([t.value for t in ts], axis=axis), tuple(ts))
    sizes = [t.value.shape[axis] for t in ts]

    def pull(g):
        start = 0
        for t, n in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accumulate(t, g[tuple(sl)])
            start += n

    out.pullback = pull
    return out


def stack(xs, axis=0):
    if not _any_tensor(*xs):
        return np.stack(xs, axis=axis)
    ts = [astensor(x) for x in xs]
    out = Tensor(np.stack([t.value for t in ts], axis=axis), tuple(ts))

    def pull(g):
        for i, t in enumerate(ts):
            _accumulate(t, np.take(g, i, axis=axis))

    out.pullback = pull
    return out


# -- reductions -----------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    out = Tensor(np.sum(x.value, axis=axis, keepdims=keepdims), (x,))

    def pull(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.value.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.value.shape).copy())

    out.pullback = pull
    return out


def tmean(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return np.mean(x, axis=axis, keepdims=keepdims)
    if axis is None:
        n = x.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.value.shape[ax]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- elementwise ----------------------------------------------------------


def sin(x):
    if not isinstance(x, Tensor):
        return np.sin(x)
    out = Tensor(np.sin(x.value), (x,))
    out.pullback = lambda g: _accumulate(x, g * np.cos(x.value))
    return out


def cos(x):
    if not isinstance(x, Tensor):
        return np.cos(x)
    out = Tensor(np.cos(x.value), (x,))
    out.pullback = lambda g: _accumulate(x, -g * np.sin(x.value))
    return out


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    v = np.tanh(x.value)
    out = Tensor(v, (x,))
    out.pullback = lambda g: _accumulate(x, g * (1.0 - v * v))
    return out


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    v = np.exp(x.value)
    out = Tensor(v, (x,))
    out.pullback = lambda g: _accumulate(x, g * v)
    return out


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    out = Tensor(np.log(x.value), (x,))
    out.pullback = lambda g: _accumulate(x, g / x.value)
    return out


def sqrt(x):
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    v = np.sqrt(x.value)
    out = Tensor(v, (x,))
    out.pullback = lambda g: _accumulate(x, g * 0.5 / v)
    return out


def atan2(y, x):
    if not _any_tensor(y, x):
        return np.arctan2(y, x)
    y, x = astensor(y), astensor(x)
    out = Tensor(np.arctan2(y.value, x.value), (y, x))
    denom = y.value * y.value + x.value * x.value

    def pull(g):
        _accumulate(y, _unbroadcast(g * x.value / denom, y.value.shape))
        _accumulate(x, _unbroadcast(-g * y.value / denom, x.value.shape))

    out.pullback = pull
    return out


def where(cond, a, b):
    """Select per-element; ``cond`` is a plain boolean array, not a Tensor.

    Gradients flow only into the selected branch. Guard any branch whose
    *unselected* values could produce non-finite intermediates.
    """
    cond = np.asarray(cond, dtype=bool)
    if not _any_tensor(a, b):
        return np.where(cond, a, b)
    a, b = astensor(a), astensor(b)
    out = Tensor(np.where(cond, a.value, b.value), (a, b))

    def pull(g):
        _accumulate(a, _unbroadcast(np.where(cond, g, 0.0), a.value.shape))
        _accumulate(b, _unbroadcast(np.where(cond, 0.0, g), b.value.shape))

    out.pullback = pull
    return out


def clip(x, lo, hi):
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    inside = (x.value > lo) & (x.value < hi)
    out = Tensor(np.clip(x.value, lo, hi), (x,))
    out.pullback = lambda g: _accumulate(x, np.where(inside, g, 0.0))
    return out
