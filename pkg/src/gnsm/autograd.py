"""A small array-level reverse-mode differentiation engine.

Each :class:`Var` wraps a numpy array and, while taping is enabled, records
its parents together with a closure mapping the output cotangent to parent
cotangents. Ops are coarse (layer norm, GELU, per-block softmax are single
nodes) so the Python overhead per training step stays at a few hundred nodes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPING = True


class TapeError(RuntimeError):
    """Raised when gradients are requested for something that was not taped."""


@contextlib.contextmanager
def no_tape():
    global _TAPING
    prev, _TAPING = _TAPING, False
    try:
        yield
    finally:
        _TAPING = prev


class Var:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray binary ops defer to Var

    def __init__(self, value, requires_grad=False, parents=(), vjp=None, name=None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other, self)))

    def __rsub__(self, other):
        return add(as_var(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x, like: Var = None) -> Var:
    if isinstance(x, Var):
        return x
    if like is not None and isinstance(x, (int, float)):
        return Var(np.asarray(x, dtype=like.value.dtype))
    return Var(x)


def _pair(a, b):
    if isinstance(a, Var):
        return a, as_var(b, a)
    b = as_var(b)
    return as_var(a, b), b


def _node(value, parents, vjp) -> Var:
    parents = tuple(parents)
    if _TAPING and any(p.requires_grad for p in parents):
        return Var(value, True, parents, vjp)
    return Var(value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b) -> Var:
    a, b = _pair(a, b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = _pair(a, b)

    def vjp(g):
        return (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None)

    return _node(a.value * b.value, (a, b), vjp)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g):
        return (g @ b.value.T if a.requires_grad else None,
                a.value.T @ g if b.requires_grad else None)

    return _node(a.value @ b.value, (a, b), vjp)


def getitem(a, idx) -> Var:
    a = as_var(a)

    def vjp(g):
        out = np.zeros_like(a.value, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), vjp)


def sum_all(a) -> Var:
    a = as_var(a)
    return _node(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Var:
    a = as_var(a)
    n = a.value.size
    return _node(np.mean(a.value), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.value.dtype),))


def square(a) -> Var:
    a = as_var(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


# ---------------------------------------------------------------------------
# fused layers

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Var:
    """GELU, tanh approximation."""
    a = as_var(a)
    x = a.value
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _node(out, (a,), vjp)


def leaky_relu(a, slope: float = 0.01) -> Var:
    a = as_var(a)
    pos = a.value > 0
    return _node(np.where(pos, a.value, slope * a.value), (a,),
                 lambda g: (np.where(pos, g, slope * g),))


def layer_norm(a, eps: float = 1e-5) -> Var:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = as_var(a)
    x = a.value
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        return (inv * (g - g.mean(-1, keepdims=True) - xhat * (g * xhat).mean(-1, keepdims=True)),)

    return _node(xhat, (a,), vjp)


def segment_softmax(a, starts: np.ndarray, sizes: np.ndarray) -> Var:
    """Softmax over contiguous column segments of a 2-D array."""
    a = as_var(a)
    x = a.value
    m = np.repeat(np.maximum.reduceat(x, starts, axis=-1), sizes, axis=-1)
    e = np.exp(x - m)
    p = e / np.repeat(np.add.reduceat(e, starts, axis=-1), sizes, axis=-1)

    def vjp(g):
        dot = np.repeat(np.add.reduceat(g * p, starts, axis=-1), sizes, axis=-1)
        return (p * (g - dot),)

    return _node(p, (a,), vjp)


def segment_log_softmax(a, starts: np.ndarray, sizes: np.ndarray) -> Var:
    a = as_var(a)
    x = a.value
    m = np.repeat(np.maximum.reduceat(x, starts, axis=-1), sizes, axis=-1)
    e = np.exp(x - m)
    s = np.add.reduceat(e, starts, axis=-1)
    out = x - m - np.repeat(np.log(s), sizes, axis=-1)
    p = e / np.repeat(s, sizes, axis=-1)

    def vjp(g):
        return (g - p * np.repeat(np.add.reduceat(g, starts, axis=-1), sizes, axis=-1),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Var) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt: Sequence[Var]) -> list:
    """Gradients of the scalar ``loss`` with respect to each Var in ``wrt``.

    Leaves the loss does not depend on get zero gradients.
    """
    if not isinstance(loss, Var):
        raise TapeError("loss was not produced by a taped computation")
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
    grads = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for v in reversed(_toposort(loss)):
            g = grads.pop(id(v), None) if v.parents else grads.get(id(v))
            if g is None or v.vjp is None:
                continue
            for p, gp in zip(v.parents, v.vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + gp
                else:
                    grads[id(p)] = gp
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


def leaves(values: Iterable[np.ndarray]) -> list:
    return [Var(v, requires_grad=True) for v in values]
