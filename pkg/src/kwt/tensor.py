"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the encoder actually needs are implemented: broadcasted
elementwise arithmetic, (batched) matmul, reshape/transpose/slice/concat,
reductions, softmax, exact-erf GELU, layer norm and smoothed cross entropy.
Tensors default to float32; gradient-check tests build float64 tensors and
every op preserves the input dtype.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, InputError

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-d array with an optional gradient slot and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self, seed=None):
        """Backpropagate from this tensor.

        `seed` defaults to ones, which is the usual choice for a scalar loss.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
        topo = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        grads = {id(self): seed}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            if t._backward is not None:
                for parent, pg in zip(t._parents, t._backward(g)):
                    if pg is None:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self):
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum gradient `g` down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data, parents, backward):
    rg = any(p.requires_grad or p._backward is not None for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a = _wrap(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b):
    a = _wrap(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def matmul(a, b):
    a, b = _wrap(a, DEFAULT_DTYPE), _wrap(b, a.dtype if isinstance(a, Tensor) else DEFAULT_DTYPE)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# -- shape manipulation -----------------------------------------------------

def reshape(x, shape):
    old = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (x,), backward)


def transpose(x, axes=None):
    out = x.data.transpose(axes) if axes else x.data.T
    if axes:
        inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv) if axes else g.T,)

    return _make(out, (x,), backward)


def swapaxes(x, a, b):
    out = np.swapaxes(x.data, a, b)

    def backward(g):
        return (np.swapaxes(g, a, b),)

    return _make(out, (x,), backward)


def getitem(x, idx):
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def broadcast_to(x, shape):
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), backward)


# -- reductions -------------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- nonlinearities ---------------------------------------------------------

def softmax(x, axis=-1):
    """Numerically safe softmax (max-subtraction) along `axis`."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (x,), backward)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x):
    """Exact GELU: x * Phi(x) with the Gaussian CDF via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    y = (xd * cdf).astype(xd.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return _make(y, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ConfigurationError(
            f"layer_norm affine shape mismatch: x last axis {d}, gamma {gamma.shape}, beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = gamma.data * xhat + beta.data

    def backward(g):
        reduce_axes = tuple(range(xd.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx.astype(xd.dtype), dgamma, dbeta

    return _make(y, (x, gamma, beta), backward)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


def cross_entropy_smoothed(logits, targets, smoothing=0.0):
    """Mean cross entropy of softmax(logits) against label-smoothed one-hots.

    The true class receives 1 - smoothing + smoothing/C, all others smoothing/C.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ConfigurationError(f"smoothing must be in [0, 1): {smoothing}")
    targets = np.asarray(targets)
    B, C = logits.shape
    if targets.shape != (B,):
        raise InputError(f"targets shape {targets.shape} does not match batch {B}")
    if targets.min() < 0 or targets.max() >= C:
        raise InputError(f"target ids outside [0, {C})")
    q = np.full((B, C), smoothing / C, dtype=logits.dtype)
    q[np.arange(B), targets] += 1.0 - smoothing
    logp = log_softmax(logits, axis=-1)
    return mul(sum_(mul(Tensor(q), logp)), -1.0 / B)
