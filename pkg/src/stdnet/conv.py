"""Dilated 3D / 2D-spatial / 1D-temporal convolutions with explicit backward.

All convolutions work on ``[C, D, H, W]`` tensors with "same" zero padding and
stride 1.  A 2D spatial conv is a 3D conv whose kernel has temporal extent 1
(weights shared over time slots); a 1D temporal conv has spatial extent 1x1.
Since degenerate kernel axes have extent 1, one dilation rate ``r`` serves all
three kinds.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .tensor import ShapeError

KINDS = ("3d", "2d", "1d")


@dataclass(frozen=True)
class ConvSpec:
    kernel_extent: tuple[int, int, int]
    dilation: int = 1
    in_channels: int = 1
    out_channels: int = 1
    bias: bool = True
    padding: str = "same-zero"

    def __post_init__(self):
        if len(self.kernel_extent) != 3:
            raise ValueError("kernel_extent must be (n_t, n_s1, n_s2)")
        for k in self.kernel_extent:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel extents must be odd positive, got {self.kernel_extent}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.padding != "same-zero":
            raise ValueError("only same-zero padding is supported")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, *self.kernel_extent)

    @property
    def kind(self):
        nt, n1, n2 = self.kernel_extent
        if nt == 1:
            return "2d"
        if n1 == 1 and n2 == 1:
            return "1d"
        return "3d"

    @classmethod
    def spatial(cls, c_in, c_out, k=3, dilation=1, bias=True):
        return cls((1, k, k), dilation, c_in, c_out, bias)

    @classmethod
    def temporal(cls, c_in, c_out, k=3, dilation=1, bias=True):
        return cls((k, 1, 1), dilation, c_in, c_out, bias)

    @classmethod
    def pointwise(cls, c_in, c_out, bias=True):
        return cls((1, 1, 1), 1, c_in, c_out, bias)


@dataclass
class ConvWeights:
    w: np.ndarray
    b: np.ndarray | None = None

    def check(self, spec: ConvSpec):
        if self.w.shape != spec.weight_shape:
            raise ShapeError(f"weight shape {self.w.shape} does not match spec {spec.weight_shape}")
        if spec.bias and (self.b is None or self.b.shape != (spec.out_channels,)):
            raise ShapeError(f"spec wants a bias of shape ({spec.out_channels},)")


def init_weights(spec: ConvSpec, rng: np.random.Generator, dtype=np.float64) -> ConvWeights:
    """Kaiming fan-in normal weights, zero bias."""
    fan_in = spec.in_channels * int(np.prod(spec.kernel_extent))
    w = rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / fan_in)
    b = np.zeros(spec.out_channels, dtype=dtype) if spec.bias else None
    return ConvWeights(w.astype(dtype), b)


def _pads(kshape, r):
    return [(r * (k // 2), r * (k // 2)) for k in kshape]


def _taps(kshape):
    return product(*(range(k) for k in kshape))


def _im2col(x, kshape, r):
    """Gather every kernel tap of the zero-padded input: ``[C_in, K, D, H, W]``, taps row-major."""
    c_in, d, h, wd = x.shape
    (pt, _), (ph, _), (pw, _) = _pads(kshape, r)
    xp = np.zeros((c_in, d + 2 * pt, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, pt:pt + d, ph:ph + h, pw:pw + wd] = x
    cols = np.empty((c_in, int(np.prod(kshape)), d, h, wd), dtype=x.dtype)
    for t, (l, m, k) in enumerate(_taps(kshape)):
        cols[:, t] = xp[:, l * r:l * r + d, m * r:m * r + h, k * r:k * r + wd]
    return cols


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, dilation: int = 1,
                 return_cols: bool = False):
    """Dilated, same-padded correlation of ``x`` [C_in, D, H, W] with ``w`` [C_out, C_in, kt, kh, kw].

    Taps are gathered into a column matrix and reduced with a single
    ``[C_out, C_in*K] @ [C_in*K, D*H*W]`` product; the bias is added last.
    With ``return_cols`` the column matrix is returned too, for reuse in backward.
    """
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"expected x [C,D,H,W] and w [O,C,kt,kh,kw], got {x.shape} and {w.shape}")
    c_out, c_in, *kshape = w.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"channel mismatch: input has {x.shape[0]}, weights expect {c_in}")
    _, d, h, wd = x.shape
    n = d * h * wd
    if kshape == [1, 1, 1]:
        cols = x.reshape(c_in, n)
    else:
        cols = _im2col(x, kshape, dilation).reshape(-1, n)
    y = w.reshape(c_out, -1) @ cols
    if b is not None:
        y += b[:, None]
    y = y.reshape(c_out, d, h, wd)
    return (y, cols) if return_cols else y


def conv_backward_raw(x, w, grad_out, dilation=1, need_bias=True, cols=None):
    """Gradients of :func:`conv_forward` w.r.t. x, w and (optionally) b.

    ``cols`` may carry the column matrix saved by the forward pass.
    """
    c_out, c_in, *kshape = w.shape
    if grad_out.shape != (c_out, *x.shape[1:]):
        raise ShapeError(f"upstream grad shape {grad_out.shape} != output shape {(c_out, *x.shape[1:])}")
    _, d, h, wd = x.shape
    n = d * h * wd
    g = grad_out.reshape(c_out, n)
    gb = g.sum(axis=1) if need_bias else None
    if kshape == [1, 1, 1]:
        w2 = w.reshape(c_out, c_in)
        gw = (g @ x.reshape(c_in, n).T).reshape(w.shape)
        gx = (w2.T @ g).reshape(x.shape)
        return gx, gw, gb
    r = dilation
    if cols is None:
        cols = _im2col(x, kshape, r).reshape(-1, n)
    w2 = w.reshape(c_out, -1)
    gw = (g @ cols.T).reshape(w.shape)
    gcols = (w2.T @ g).reshape(c_in, -1, d, h, wd)
    pads = _pads(kshape, r)
    gxp = np.zeros((c_in, *(s + 2 * p for s, (p, _) in zip((d, h, wd), pads))), dtype=gcols.dtype)
    for t, (l, m, k) in enumerate(_taps(kshape)):
        gxp[:, l * r:l * r + d, m * r:m * r + h, k * r:k * r + wd] += gcols[:, t]
    (pt, _), (ph, _), (pw, _) = pads
    gx = gxp[:, pt:pt + d, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(gx), gw, gb


def _check_kind(kind, spec: ConvSpec):
    nt, n1, n2 = spec.kernel_extent
    if kind == "2d" and nt != 1:
        raise ValueError(f"2d conv needs temporal extent 1, got {spec.kernel_extent}")
    if kind == "1d" and (n1, n2) != (1, 1):
        raise ValueError(f"1d conv needs spatial extent 1x1, got {spec.kernel_extent}")


def _apply(kind, x, spec: ConvSpec, wts: ConvWeights):
    _check_kind(kind, spec)
    wts.check(spec)
    return conv_forward(x, wts.w, wts.b if spec.bias else None, spec.dilation)


def conv3d_dilated(x, spec: ConvSpec, wts: ConvWeights):
    return _apply("3d", x, spec, wts)


def conv2d_dilated(x, spec: ConvSpec, wts: ConvWeights):
    """Spatial conv; a ``[C, H, W]`` input is treated as a single time slot."""
    if x.ndim == 3:
        return _apply("2d", x[:, None], spec, wts)[:, 0]
    return _apply("2d", x, spec, wts)


def conv1d_temporal(x, spec: ConvSpec, wts: ConvWeights):
    return _apply("1d", x, spec, wts)


def conv_backward(kind: str, x, spec: ConvSpec, wts: ConvWeights, upstream_grad):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_b`` is None when the spec has no bias."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    _check_kind(kind, spec)
    wts.check(spec)
    squeeze = kind == "2d" and x.ndim == 3
    if squeeze:
        x, upstream_grad = x[:, None], upstream_grad[:, None]
    gx, gw, gb = conv_backward_raw(x, wts.w, upstream_grad, spec.dilation, need_bias=spec.bias)
    if squeeze:
        gx = gx[:, 0]
    return gx, gw, gb


def decomposition_param_count(n_t, n_s1, n_s2, c_in, c_out, bias=False):
    """Weights of a full n_t x n_s1 x n_s2 conv vs its spatial(1 x n_s1 x n_s2) + temporal(n_t x 1 x 1) split.

    The intermediate width equals ``c_out``.
    """
    for k in (n_t, n_s1, n_s2):
        if k < 1 or k % 2 == 0:
            raise ValueError("kernel extents must be odd positive")
    c_mid = c_out
    full3d = c_out * c_in * n_t * n_s1 * n_s2 + (c_out if bias else 0)
    decomposed = c_mid * c_in * n_s1 * n_s2 + c_out * c_mid * n_t
    if bias:
        decomposed += c_mid + c_out
    return {"full3d": full3d, "decomposed": decomposed, "ratio": decomposed / full3d}
