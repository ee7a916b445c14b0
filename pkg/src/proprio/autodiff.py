"""Small reverse-mode autodiff over numpy arrays.

Just enough machinery for the two sequence models and their loss terms:
broadcast-aware arithmetic, batched matmul, the handful of nonlinearities
the layers use, fused losses, and the selective-scan recurrence (dispatched
to the compiled kernel when available). Differentiable arguments are
Tensors; anything passed as a plain ndarray or scalar is a constant and
receives no gradient. Gradients are exact reverse-mode derivatives, checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from . import kernels


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _data(x, dtype=None):
    """Unwrap a Tensor, or coerce a constant; 0-d constants adopt the
    graph dtype so python floats never upcast a float32 graph."""
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None and arr.ndim == 0 and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = tuple(p for p in parents if isinstance(p, Tensor))
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- graph traversal ---------------------------------------------------

    def backward(self):
        if self.data.ndim != 0:
            raise ValueError("backward() starts from a scalar loss")
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        g = _unbroadcast(np.asarray(g, dtype=self.data.dtype), self.data.shape)
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        od = _data(other, self.data.dtype)
        out = Tensor(self.data + od, (self, other))

        def back(g):
            self._accum(g)
            if isinstance(other, Tensor):
                other._accum(g)
        out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other):
        od = _data(other, self.data.dtype)
        out = Tensor(self.data * od, (self, other))

        def back(g):
            self._accum(g * od)
            if isinstance(other, Tensor):
                other._accum(g * self.data)
        out._backward = back
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -_data(other))

    def __matmul__(self, other):
        od = _data(other)
        out = Tensor(np.matmul(self.data, od), (self, other))

        def back(g):
            self._accum(np.matmul(g, np.swapaxes(od, -1, -2)))
            if isinstance(other, Tensor):
                other._accum(np.matmul(np.swapaxes(self.data, -1, -2), g))
        out._backward = back
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(*axes), (self,))
        out._backward = lambda g: self._accum(g.transpose(*inv))
        return out


# -- nonlinearities ----------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s, (x,))
    out._backward = lambda g: x._accum(g * s * (1.0 - s))
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e, (x,))
    out._backward = lambda g: x._accum(g * e)
    return out


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(np.zeros((), dtype=x.dtype), x.data), (x,))
    out._backward = lambda g: x._accum(g / (1.0 + np.exp(-x.data)))
    return out


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s, (x,))
    out._backward = lambda g: x._accum(g * s * (1.0 + x.data * (1.0 - s)))
    return out


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = gain * x / sqrt(mean(x^2, -1) + eps)."""
    d = x.data.shape[-1]
    r = 1.0 / np.sqrt(np.mean(np.square(x.data), axis=-1, keepdims=True) + eps)
    n = x.data * r
    out = Tensor(n * gain.data, (x, gain))

    def back(g):
        gain._accum(g * n)
        gg = g * gain.data
        dot = np.sum(gg * x.data, axis=-1, keepdims=True)
        x._accum(gg * r - x.data * (dot * r ** 3 / d))
    out._backward = back
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    out = Tensor(table.data[ids], (table,))

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accum(gt)
    out._backward = back
    return out


def masked_softmax(scores: Tensor, additive_mask: np.ndarray) -> Tensor:
    """Softmax over the last axis of scores + additive_mask (constant)."""
    z = scores.data + additive_mask
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(p, (scores,))

    def back(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        scores._accum(p * (g - dot))
    out._backward = back
    return out


def scan(decay: Tensor, inject: Tensor) -> Tensor:
    """Recurrence h[t] = decay[t] * h[t-1] + inject[t] over (B, T, S)."""
    h = kernels.scan_forward(
        np.ascontiguousarray(decay.data), np.ascontiguousarray(inject.data))
    out = Tensor(h, (decay, inject))

    def back(g):
        ga, gx = kernels.scan_backward(
            np.ascontiguousarray(decay.data), h, np.ascontiguousarray(g))
        decay._accum(ga)
        inject._accum(gx)
    out._backward = back
    return out


# -- reductions and fused losses ---------------------------------------------

def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(weights * x) with constant weights."""
    out = Tensor(np.sum(x.data * weights), (x,))
    out._backward = lambda g: x._accum(g * weights)
    return out


def cross_entropy_logits(logits: Tensor, targets: np.ndarray,
                         weights: np.ndarray) -> Tensor:
    """sum(weights * nll) where nll is the per-position negative
    log-likelihood of targets under softmax(logits)."""
    z = logits.data
    m = np.max(z, axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.sum(np.exp(z - m), axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    out = Tensor(np.sum(nll * weights), (logits,))

    def back(g):
        p = np.exp(z - m)
        p /= np.sum(p, axis=-1, keepdims=True)
        np.subtract.at(p, (*np.indices(targets.shape), targets), 1.0)
        logits._accum(g * weights[..., None] * p)
    out._backward = back
    return out


def bce_logits(z: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum(weights * bce) with bce = softplus(z) - z*y, the stable
    binary cross-entropy of sigmoid(z) against labels y."""
    zd = z.data
    bce = np.logaddexp(np.zeros((), dtype=zd.dtype), zd) - zd * labels
    out = Tensor(np.sum(bce * weights), (z,))

    def back(g):
        s = 1.0 / (1.0 + np.exp(-zd))
        z._accum(g * weights * (s - labels))
    out._backward = back
    return out
