"""Dense spatial / temporal blocks, their composition with channel attention,
and bilinear upsampling.

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names, e.g.
``dstb0.dsb.reduce1.w``; each block touches only keys under its own prefix.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import attention as att
from .conv import ConvSpec, conv_backward_raw, conv_forward, init_weights
from .tensor import ShapeError


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int = 512
    bottleneck_channels: int = 256
    growth_channels: int = 64
    dilation_rates: tuple[int, ...] = (1, 2, 3)
    fuse_to: int = 512

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(self.dilation_rates))
        if not self.dilation_rates or min(self.dilation_rates) < 1:
            raise ValueError(f"dilation rates must be nonempty and positive: {self.dilation_rates}")
        if min(self.in_channels, self.bottleneck_channels, self.growth_channels, self.fuse_to) < 1:
            raise ValueError("block widths must be positive")

    def concat_widths(self):
        """Width of the running concatenation seen by each reduce conv."""
        return [self.in_channels + i * self.growth_channels for i in range(len(self.dilation_rates))]

    @property
    def fuse_in(self):
        return self.in_channels + len(self.dilation_rates) * self.growth_channels


def block_specs(cfg: BlockConfig, kind: str):
    """Ordered (name, ConvSpec) list for a spatial ("dsb") or temporal ("dtb") block."""
    make = ConvSpec.spatial if kind == "dsb" else ConvSpec.temporal
    out = []
    for i, (width, r) in enumerate(zip(cfg.concat_widths(), cfg.dilation_rates)):
        out.append((f"reduce{i}", ConvSpec.pointwise(width, cfg.bottleneck_channels)))
        out.append((f"dil{i}", make(cfg.bottleneck_channels, cfg.growth_channels, 3, r)))
    out.append(("fuse", ConvSpec.pointwise(cfg.fuse_in, cfg.fuse_to)))
    return out


def init_block(cfg: BlockConfig, kind: str, prefix: str, rng, dtype=np.float64) -> dict:
    params = {}
    for name, spec in block_specs(cfg, kind):
        wts = init_weights(spec, rng, dtype)
        params[f"{prefix}.{name}.w"] = wts.w
        params[f"{prefix}.{name}.b"] = wts.b
    return params


def _conv_relu(x, params, key, r=1):
    y, cols = conv_forward(x, params[key + ".w"], params[key + ".b"], r, return_cols=True)
    np.maximum(y, 0, out=y)
    return y, (x, cols, y)


def _conv_relu_back(g, saved, params, key, grads, r=1):
    x, cols, y = saved
    g = g * (y > 0)
    gx, gw, gb = conv_backward_raw(x, params[key + ".w"], g, r, cols=cols)
    grads[key + ".w"] = gw
    grads[key + ".b"] = gb
    return gx


def block_forward(x, cfg: BlockConfig, params, kind: str, prefix: str):
    """Dense dilated block; returns ``(out [fuse_to, D, H, W], cache)``."""
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"{prefix}: expected [{cfg.in_channels}, D, H, W] input, got {x.shape}")
    stack = x
    steps = []
    for i, r in enumerate(cfg.dilation_rates):
        red, s_red = _conv_relu(stack, params, f"{prefix}.reduce{i}")
        grow, s_grow = _conv_relu(red, params, f"{prefix}.dil{i}", r)
        steps.append((stack.shape[0], s_red, s_grow))
        stack = np.concatenate([stack, grow], axis=0)
    out, s_out = _conv_relu(stack, params, f"{prefix}.fuse")
    return out, (steps, s_out)


def block_backward(grad_out, cfg: BlockConfig, params, prefix: str, cache):
    steps, s_out = cache
    grads = {}
    g_stack = _conv_relu_back(grad_out, s_out, params, f"{prefix}.fuse", grads)
    for i in reversed(range(len(steps))):
        c, s_red, s_grow = steps[i]
        g_prev, g_grow = g_stack[:c], g_stack[c:]
        g_red = _conv_relu_back(g_grow, s_grow, params, f"{prefix}.dil{i}", grads, cfg.dilation_rates[i])
        g_stack = g_prev + _conv_relu_back(g_red, s_red, params, f"{prefix}.reduce{i}", grads)
    return g_stack, grads


def dsb_forward(x, cfg: BlockConfig, params, prefix="dsb"):
    return block_forward(x, cfg, params, "dsb", prefix)[0]


def dtb_forward(x, cfg: BlockConfig, params, prefix="dtb"):
    return block_forward(x, cfg, params, "dtb", prefix)[0]


def _attn_params(params, key):
    if key + ".w1" not in params:
        return None
    return att.AttentionParams(params[key + ".w1"], params[key + ".w2"])


def init_dstb(cfg_s: BlockConfig, cfg_t: BlockConfig, prefix: str, rng, reduction=16,
              attention=True, dtype=np.float64) -> dict:
    if cfg_t.in_channels != cfg_s.fuse_to:
        raise ShapeError(f"DTB input width {cfg_t.in_channels} != DSB output width {cfg_s.fuse_to}")
    params = init_block(cfg_s, "dsb", f"{prefix}.dsb", rng, dtype)
    if attention:
        a = att.init_attention(cfg_s.fuse_to, reduction, rng, dtype)
        params[f"{prefix}.dsb.attn.w1"], params[f"{prefix}.dsb.attn.w2"] = a.w1, a.w2
    params.update(init_block(cfg_t, "dtb", f"{prefix}.dtb", rng, dtype))
    if attention:
        a = att.init_attention(cfg_t.fuse_to, reduction, rng, dtype)
        params[f"{prefix}.dtb.attn.w1"], params[f"{prefix}.dtb.attn.w2"] = a.w1, a.w2
    return params


def dstb_forward(x, cfg_s: BlockConfig, cfg_t: BlockConfig, params, prefix="dstb",
                 bypass_attention=False, return_cache=False):
    """DSB -> spatial attention -> DTB -> temporal attention.

    Attention is skipped (alpha = 1) when ``bypass_attention`` is set or when the
    params carry no attention weights for this block.
    """
    ps = None if bypass_attention else _attn_params(params, f"{prefix}.dsb.attn")
    pt = None if bypass_attention else _attn_params(params, f"{prefix}.dtb.attn")
    s, c_s = block_forward(x, cfg_s, params, "dsb", f"{prefix}.dsb")
    s_att, alpha_s, a_s = att.attention_forward(s, ps, "spatial")
    t, c_t = block_forward(s_att, cfg_t, params, "dtb", f"{prefix}.dtb")
    out, alpha_t, a_t = att.attention_forward(t, pt, "temporal")
    if return_cache:
        return out, {"c_s": c_s, "a_s": a_s, "c_t": c_t, "a_t": a_t, "ps": ps, "pt": pt,
                     "alpha_s": alpha_s, "alpha_t": alpha_t}
    return out


def dstb_backward(grad_out, cfg_s: BlockConfig, cfg_t: BlockConfig, params, cache, prefix="dstb"):
    grads = {}
    g, gw1, gw2 = att.attention_backward(grad_out, cache["pt"], cache["a_t"])
    if gw1 is not None:
        grads[f"{prefix}.dtb.attn.w1"], grads[f"{prefix}.dtb.attn.w2"] = gw1, gw2
    g, gt = block_backward(g, cfg_t, params, f"{prefix}.dtb", cache["c_t"])
    grads.update(gt)
    g, gw1, gw2 = att.attention_backward(g, cache["ps"], cache["a_s"])
    if gw1 is not None:
        grads[f"{prefix}.dsb.attn.w1"], grads[f"{prefix}.dsb.attn.w2"] = gw1, gw2
    g, gs = block_backward(g, cfg_s, params, f"{prefix}.dsb", cache["c_s"])
    grads.update(gs)
    return g, grads


@lru_cache(maxsize=64)
def _interp_matrix(n: int, scale: int) -> np.ndarray:
    # half-pixel centres: output i samples input at (i + 0.5)/scale - 0.5, clamped
    src = (np.arange(n * scale) + 0.5) / scale - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    m = np.zeros((n * scale, n))
    rows = np.arange(n * scale)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    return m


def bilinear_upsample(x, scale: int = 8):
    """Separable bilinear resize of ``[..., H, W]`` to ``[..., scale*H, scale*W]``."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if scale == 1:
        return x.copy()
    uh = _interp_matrix(x.shape[-2], scale).astype(x.dtype, copy=False)
    uw = _interp_matrix(x.shape[-1], scale).astype(x.dtype, copy=False)
    return uh @ x @ uw.T


def bilinear_upsample_backward(grad_out, scale: int = 8):
    if scale == 1:
        return grad_out.copy()
    h, w = grad_out.shape[-2] // scale, grad_out.shape[-1] // scale
    uh = _interp_matrix(h, scale).astype(grad_out.dtype, copy=False)
    uw = _interp_matrix(w, scale).astype(grad_out.dtype, copy=False)
    return uh.T @ grad_out @ uw
