"""Elementwise/linear primitives and the finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects (C order, innermost axis = width).
Every differentiable primitive comes as a ``*_forward`` / ``*_backward`` pair so
that each backward can be checked in isolation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

_BINARY = ("add", "sub", "mul")
_UNARY = ("relu", "sigmoid")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class GradPair:
    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0)


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``op`` in {add, sub, mul, scale, relu, sigmoid}; the result has a's shape."""
    a = np.asarray(a)
    if op in _UNARY:
        return relu(a) if op == "relu" else sigmoid(a)
    if op == "scale":
        if not np.isscalar(b):
            raise TypeError("scale expects a scalar factor")
        return a * b
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if not np.isscalar(b):
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


def matvec(w, v) -> np.ndarray:
    w = np.asarray(w)
    v = np.asarray(v)
    if w.ndim != 2 or v.ndim != 1:
        raise ShapeError(f"matvec expects rank-2 and rank-1 inputs, got {w.shape} and {v.shape}")
    if w.shape[1] != v.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {w.shape} . {v.shape}")
    return w @ v


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def sigmoid_backward(grad_out, y):
    """``y`` is the forward output."""
    return grad_out * y * (1.0 - y)


def maxpool2_forward(x):
    """2x2/stride-2 max pooling over the last two axes.

    Returns the pooled tensor and the argmax index (0..3) of each window; ties
    go to the first element in row-major window order.
    """
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H, W; got {h}x{w}")
    win = x.reshape(*lead, h // 2, 2, w // 2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(grad_out, idx):
    *lead, h2, w2 = grad_out.shape
    win = np.zeros((*lead, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(*lead, h2, w2, 2, 2)
    return np.moveaxis(win, -2, -3).reshape(*lead, 2 * h2, 2 * w2)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst_index: tuple | None = None

    def __bool__(self):
        return self.passed


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5,
                 indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (only ``indices`` if given; others left 0)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = indices if indices is not None else np.ndindex(*x.shape)
    for idx in it:
        idx = tuple(idx)
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near index {idx}")
        g[idx] = (fp - fm) / (2 * eps)
    return g


def gradcheck(f: Callable[[np.ndarray], float], x, analytic=None, eps: float = 1e-5,
              tol: float = 1e-4, indices=None) -> GradCheckReport:
    """Compare an analytic gradient against central differences.

    ``f`` may return either a scalar or ``(scalar, grad)``; in the latter case
    the analytic gradient comes from ``f`` itself unless ``analytic`` is given.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-3]")
    x = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("gradcheck input is not finite")

    def scalar(z):
        out = f(z)
        return float(out[0] if isinstance(out, tuple) else out)

    if analytic is None:
        out = f(x.copy())
        if not isinstance(out, tuple):
            raise TypeError("f must return (value, grad) when analytic is not given")
        analytic = out[1]
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic grad shape {analytic.shape} != input shape {x.shape}")

    if indices is None:
        indices = list(np.ndindex(*x.shape))
    indices = [tuple(np.atleast_1d(i)) for i in indices]
    num = numeric_grad(scalar, x, eps, indices)
    worst, worst_idx = 0.0, None
    for idx in indices:
        a, n = analytic[idx], num[idx]
        rel = abs(a - n) / max(abs(a), abs(n), 1e-8)
        if rel > worst:
            worst, worst_idx = rel, idx
    return GradCheckReport(float(worst), worst < tol, len(indices), worst_idx)
