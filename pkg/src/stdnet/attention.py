"""Channel attention: global average pooling -> FC -> ReLU -> FC -> sigmoid -> rescale.

The spatial variant pools over (H, W) only, so a ``[C, D, H, W]`` feature map
yields one gate per time slot (``[C, D]``); the temporal variant pools over
(D, H, W).  Both share :func:`attention_gate` and :func:`channel_scale`, which
accept a gate of shape ``x.shape[:k]`` for any k >= 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, relu, sigmoid


@dataclass
class AttentionParams:
    w1: np.ndarray  # [C/rho, C]
    w2: np.ndarray  # [C, C/rho]
    reduction: int = 16

    @property
    def channels(self):
        return self.w1.shape[1]


def hidden_width(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def init_attention(channels: int, reduction: int, rng: np.random.Generator, dtype=np.float64):
    hid = hidden_width(channels, reduction)
    w1 = rng.standard_normal((hid, channels)) * np.sqrt(2.0 / channels)
    w2 = rng.standard_normal((channels, hid)) * np.sqrt(1.0 / hid)
    return AttentionParams(w1.astype(dtype), w2.astype(dtype), reduction)


def gap_temporal(x):
    """Per-channel mean over D x H x W of a ``[C, D, H, W]`` tensor."""
    if x.ndim != 4:
        raise ShapeError(f"gap_temporal expects [C, D, H, W], got {x.shape}")
    return x.mean(axis=(1, 2, 3))


def gap_spatial(x):
    """Mean over the last two axes: ``[C, H, W] -> [C]``, ``[C, D, H, W] -> [C, D]``."""
    if x.ndim < 3:
        raise ShapeError(f"gap_spatial expects at least [C, H, W], got {x.shape}")
    return x.mean(axis=(-2, -1))


def gap_backward(grad_a, x_shape):
    k = grad_a.ndim
    n = int(np.prod(x_shape[k:]))
    return np.broadcast_to(grad_a.reshape(grad_a.shape + (1,) * (len(x_shape) - k)) / n, x_shape).copy()


def attention_gate(a, p: AttentionParams, cache=False):
    """alpha = sigmoid(W2 relu(W1 a)); ``a`` is ``[C]`` or ``[C, K]`` (K independent vectors)."""
    if a.shape[0] != p.w1.shape[1] or p.w2.shape != (p.w1.shape[1], p.w1.shape[0]):
        raise ShapeError(f"gate dims disagree: a {a.shape}, W1 {p.w1.shape}, W2 {p.w2.shape}")
    h = p.w1 @ a
    hr = relu(h)
    alpha = sigmoid(p.w2 @ hr)
    if cache:
        return alpha, (a, h, hr, alpha)
    return alpha


def attention_gate_backward(grad_alpha, p: AttentionParams, cache):
    a, h, hr, alpha = cache
    gz = grad_alpha * alpha * (1.0 - alpha)
    if a.ndim == 1:
        gw2 = np.outer(gz, hr)
    else:
        gw2 = gz @ hr.T
    gh = (p.w2.T @ gz) * (h > 0)
    gw1 = np.outer(gh, a) if a.ndim == 1 else gh @ a.T
    ga = p.w1.T @ gh
    return ga, gw1, gw2


def channel_scale(x, alpha):
    """out[c, ...] = alpha[c, ...] * x[c, ...] with alpha of shape ``x.shape[:k]``."""
    if alpha.shape != x.shape[:alpha.ndim]:
        raise ShapeError(f"gate shape {alpha.shape} does not prefix tensor shape {x.shape}")
    return x * alpha.reshape(alpha.shape + (1,) * (x.ndim - alpha.ndim))


def channel_scale_backward(grad_out, x, alpha):
    k = alpha.ndim
    ex = alpha.reshape(alpha.shape + (1,) * (x.ndim - k))
    axes = tuple(range(k, x.ndim))
    return grad_out * ex, (grad_out * x).sum(axis=axes)


def attention_forward(x, p: AttentionParams | None, mode: str):
    """Full block. ``mode`` is "spatial" or "temporal"; ``p=None`` bypasses (alpha = 1).

    Returns ``(out, alpha, cache)``.
    """
    if p is None:
        return x, np.ones(x.shape[:2] if mode == "spatial" else x.shape[:1], dtype=x.dtype), None
    a = gap_spatial(x) if mode == "spatial" else gap_temporal(x)
    alpha, gcache = attention_gate(a, p, cache=True)
    return channel_scale(x, alpha), alpha, (x, alpha, gcache)


def attention_backward(grad_out, p: AttentionParams | None, cache):
    """Returns ``(grad_x, grad_w1, grad_w2)``; weight grads are None for a bypassed block."""
    if cache is None:
        return grad_out, None, None
    x, alpha, gcache = cache
    gx, galpha = channel_scale_backward(grad_out, x, alpha)
    ga, gw1, gw2 = attention_gate_backward(galpha, p, gcache)
    gx = gx + gap_backward(ga, x.shape)
    return gx, gw1, gw2
