"""Reverse-mode automatic differentiation over numpy float64 arrays.

A small tape: each op produces a Tensor holding the forward value plus a
closure that scatters the incoming gradient to its parents. Graph
construction can be switched off globally (``no_grad``) for inference.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure-forward mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; accumulates into ``.grad``."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node._backward(g, grads)  # type: ignore[call-arg]

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return powc(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(grads: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g, grads):
        if a.requires_grad:
            _accumulate(grads, a, _sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accumulate(grads, b, _sum_to_shape(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g, grads):
        if a.requires_grad:
            _accumulate(grads, a, _sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accumulate(grads, b, _sum_to_shape(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g, grads):
        if a.requires_grad:
            _accumulate(grads, a, _sum_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(grads, b, _sum_to_shape(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g, grads):
        if a.requires_grad:
            _accumulate(grads, a, _sum_to_shape(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(grads, b, _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def powc(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    data = a.data ** e

    def backward(g, grads):
        _accumulate(grads, a, g * e * a.data ** (e - 1.0))

    return _node(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g, grads):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if a.data.ndim == 1:
                ga = ga if ga.ndim == 1 else ga.sum(axis=tuple(range(ga.ndim - 1)))
            _accumulate(grads, a, _sum_to_shape(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.outer(a.data, g)
            _accumulate(grads, b, _sum_to_shape(gb, b.data.shape))

    return _node(data, (a, b), backward)


# ---- elementwise nonlinearities -----------------------------------------


def expt(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g, grads):
        _accumulate(grads, a, g * data)

    return _node(data, (a,), backward)


def logt(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g, grads):
        _accumulate(grads, a, g / a.data)

    return _node(data, (a,), backward)


def tanht(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g, grads):
        _accumulate(grads, a, g * (1.0 - data * data))

    return _node(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g, grads):
        _accumulate(grads, a, g * data * (1.0 - data))

    return _node(data, (a,), backward)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    data = x * cdf

    def backward(g, grads):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        _accumulate(grads, a, g * (cdf + x * pdf))

    return _node(data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g, grads):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accumulate(grads, a, g * s)

    return _node(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; tolerates -inf entries (treated as masked)."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g, grads):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        _accumulate(grads, a, data * (g - dot))

    return _node(data, (a,), backward)


# ---- reductions and shape ops -------------------------------------------


def sumt(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(grads, a, np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), backward)


def meant(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size if axis is None else a.data.shape[axis]

    def backward(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(grads, a, np.broadcast_to(g / denom, a.data.shape))

    return _node(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g, grads):
        _accumulate(grads, a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g, grads):
        _accumulate(grads, a, g.transpose(inv))

    return _node(data, (a,), backward)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g, grads):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                _accumulate(grads, p, g[tuple(idx)])
            offset += n

    return _node(data, tuple(parts), backward)


def take(a, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]

    def backward(g, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(grads, a, full)

    return _node(data, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def backward(g, grads):
        if gamma.requires_grad:
            _accumulate(grads, gamma, _sum_to_shape(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            _accumulate(grads, beta, _sum_to_shape(g, beta.data.shape))
        if x.requires_grad:
            gx = g * gamma.data
            t1 = gx.sum(axis=-1, keepdims=True)
            t2 = (gx * xhat).sum(axis=-1, keepdims=True)
            _accumulate(grads, x, inv * (gx - t1 / n - xhat * t2 / n))

    return _node(data, (x, gamma, beta), backward)


def interp2d(tokens, row_weights: np.ndarray, col_weights: np.ndarray) -> Tensor:
    """Bilinear grid resample: (Gr, Gc, d) tokens -> (H, W, d) pixels.

    ``row_weights`` is (H, Gr) and ``col_weights`` is (W, Gc); both are
    constant interpolation matrices.
    """
    t = as_tensor(tokens)
    rows = np.tensordot(row_weights, t.data, axes=(1, 0))  # (H, Gc, d)
    data = np.tensordot(col_weights, rows, axes=(1, 1)).transpose(1, 0, 2)  # (H, W, d)

    def backward(g, grads):
        cols = np.tensordot(col_weights.T, g, axes=(1, 1)).transpose(1, 0, 2)  # (H, Gc, d)
        gt = np.tensordot(row_weights.T, cols, axes=(1, 0))  # (Gr, Gc, d)
        _accumulate(grads, t, gt)

    return _node(data, (t,), backward)
