"""Full network: per-frame VGG-style backbone -> stacked DSTBs -> temporal mean
-> 2D head -> bilinear upsampling, with an explicit backward pass.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import blocks
from .attention import hidden_width
from .blocks import BlockConfig
from .conv import ConvSpec, conv_backward_raw, conv_forward, decomposition_param_count
from .density import DensityMap
from .tensor import ShapeError, maxpool2_backward, maxpool2_forward

POOL = "P"
BACKBONES = {
    # first ten conv layers of VGG-16 with their three max-pools
    "full_vgg10": (64, 64, POOL, 128, 128, POOL, 256, 256, 256, POOL, 512, 512, 512),
    "tiny": (8, 8, POOL, 16, 16, POOL),
}
REFERENCE_PARAM_COUNT = 18_140_000  # published total for the full network (18.14M)


@dataclass
class ModelConfig:
    backbone: str = "full_vgg10"
    image_channels: int = 3
    T: int = 10
    dstb_count: int = 4
    spatial: BlockConfig = field(default_factory=BlockConfig)
    temporal: BlockConfig = field(default_factory=BlockConfig)
    attention: bool = True
    attention_reduction: int = 16
    head_channels: tuple[int, ...] = (256, 128)
    upsample_scale: int = 8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.spatial, dict):
            self.spatial = BlockConfig(**self.spatial)
        if isinstance(self.temporal, dict):
            self.temporal = BlockConfig(**self.temporal)
        self.head_channels = tuple(self.head_channels)
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if self.T < 1 or self.dstb_count < 1:
            raise ValueError("T and dstb_count must be >= 1")
        if len(self.head_channels) != 2:
            raise ValueError("head_channels must list two widths")
        if self.upsample_scale != self.downsample:
            raise ValueError(f"upsample_scale {self.upsample_scale} must undo the backbone's "
                             f"x{self.downsample} downsampling")

    @property
    def downsample(self):
        return 2 ** BACKBONES[self.backbone].count(POOL)

    @property
    def backbone_out(self):
        return [c for c in BACKBONES[self.backbone] if c != POOL][-1]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def dstb_configs(self):
        """Per-DSTB (spatial, temporal) block configs with input widths chained."""
        out = []
        c = self.backbone_out
        for _ in range(self.dstb_count):
            s = replace(self.spatial, in_channels=c)
            t = replace(self.temporal, in_channels=s.fuse_to)
            out.append((s, t))
            c = t.fuse_to
        return out

    def to_dict(self):
        d = asdict(self)
        d["head_channels"] = list(self.head_channels)
        for k in ("spatial", "temporal"):
            d[k]["dilation_rates"] = list(d[k]["dilation_rates"])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        preset = d.pop("preset", None)
        base = PRESETS[preset]().to_dict() if preset else {}
        base.update(d)
        return cls(**base)

    @classmethod
    def full(cls, **kw):
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw):
        block = BlockConfig(in_channels=16, bottleneck_channels=8, growth_channels=4,
                            dilation_rates=(1, 2, 3), fuse_to=16)
        base = dict(backbone="tiny", image_channels=1, T=10, dstb_count=4, spatial=block,
                    temporal=block, attention_reduction=4, head_channels=(16, 8), upsample_scale=4)
        base.update(kw)
        return cls(**base)


PRESETS = {"full": ModelConfig.full, "tiny": ModelConfig.tiny}


def _backbone_layers(cfg: ModelConfig):
    """[(name, ConvSpec) or POOL] in order."""
    layers, c, i = [], cfg.image_channels, 0
    for item in BACKBONES[cfg.backbone]:
        if item == POOL:
            layers.append(POOL)
        else:
            layers.append((f"backbone.conv{i}", ConvSpec.spatial(c, item)))
            c, i = item, i + 1
    return layers


def _head_layers(cfg: ModelConfig):
    c = cfg.dstb_configs()[-1][1].fuse_to
    h1, h2 = cfg.head_channels
    return [("head.conv0", ConvSpec.spatial(c, h1)), ("head.conv1", ConvSpec.spatial(h1, h2)),
            ("head.out", ConvSpec.pointwise(h2, 1))]


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered ``name -> shape`` for every learnable tensor."""
    shapes = {}

    def add_conv(name, spec: ConvSpec):
        shapes[name + ".w"] = spec.weight_shape
        shapes[name + ".b"] = (spec.out_channels,)

    for layer in _backbone_layers(cfg):
        if layer != POOL:
            add_conv(*layer)
    for k, (s, t) in enumerate(cfg.dstb_configs()):
        for kind, bc in (("dsb", s), ("dtb", t)):
            for name, spec in blocks.block_specs(bc, kind):
                add_conv(f"dstb{k}.{kind}.{name}", spec)
            if cfg.attention:
                hid = hidden_width(bc.fuse_to, cfg.attention_reduction)
                shapes[f"dstb{k}.{kind}.attn.w1"] = (hid, bc.fuse_to)
                shapes[f"dstb{k}.{kind}.attn.w2"] = (bc.fuse_to, hid)
    for layer in _head_layers(cfg):
        add_conv(*layer)
    return shapes


def init_params(cfg: ModelConfig) -> dict:
    """Kaiming fan-in normal conv weights, zero biases; gate weights as in attention.init_attention.

    Each tensor draws from its own stream seeded by (cfg.seed, crc32(name)), so a
    parameter's initial value does not depend on which other layers exist.
    """
    dt = cfg.np_dtype
    params = {}
    for name, shape in param_shapes(cfg).items():
        rng = np.random.default_rng([cfg.seed, zlib.crc32(name.encode())])
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dt)
        elif name.endswith("attn.w1"):
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / shape[1])).astype(dt)
        elif name.endswith("attn.w2"):
            params[name] = (rng.standard_normal(shape) * np.sqrt(1.0 / shape[1])).astype(dt)
        else:
            fan_in = int(np.prod(shape[1:]))
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if name == "head.out.w":
                # nonnegative output weights: with the output clamp a negative draw can leave
                # every pixel at zero, and then no gradient ever flows
                w = np.abs(w)
            params[name] = w.astype(dt)
    return params


def total_count(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def _conv_relu(x, params, key):
    y, cols = conv_forward(x, params[key + ".w"], params[key + ".b"], return_cols=True)
    np.maximum(y, 0, out=y)
    return y, cols


def forward(clip, cfg: ModelConfig, params, return_cache=False, bypass_attention=False):
    """Predict the density map of the clip's last frame.

    ``clip`` is ``[T, C_img, H, W]``; the result is a :class:`DensityMap` of
    size H x W (or ``(values, cache)`` with ``return_cache``).
    """
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[0] != cfg.T or clip.shape[1] != cfg.image_channels:
        raise ShapeError(f"expected clip [T={cfg.T}, C={cfg.image_channels}, H, W], got {clip.shape}")
    h, w = clip.shape[2:]
    if h % cfg.downsample or w % cfg.downsample:
        raise ShapeError(f"frame size {h}x{w} not divisible by {cfg.downsample}")
    x = np.ascontiguousarray(clip.transpose(1, 0, 2, 3), dtype=cfg.np_dtype)
    cache = {"bb": [], "dstb": [], "head": []}
    for layer in _backbone_layers(cfg):
        if layer == POOL:
            y, idx = maxpool2_forward(x)
            cache["bb"].append((POOL, idx))
        else:
            y, cols = _conv_relu(x, params, layer[0])
            cache["bb"].append((layer[0], x, cols, y))
        x = y
    for k, (s, t) in enumerate(cfg.dstb_configs()):
        x, c = blocks.dstb_forward(x, s, t, params, f"dstb{k}", bypass_attention, return_cache=True)
        cache["dstb"].append(c)
    d = x.shape[1]
    x = x.mean(axis=1, keepdims=True)
    cache["tdepth"] = d
    for name, spec in _head_layers(cfg):
        y, cols = _conv_relu(x, params, name)  # ReLU after the final 1x1 = clamp at zero
        cache["head"].append((name, x, cols, y))
        x = y
    out = blocks.bilinear_upsample(x[0, 0], cfg.upsample_scale)
    if return_cache:
        return out, cache
    return DensityMap(out)


def backward(grad_out, cfg: ModelConfig, params, cache) -> dict:
    """Gradient of a scalar loss w.r.t. every parameter, given dLoss/d(density)."""
    grads = {}
    g = blocks.bilinear_upsample_backward(np.asarray(grad_out, dtype=cfg.np_dtype), cfg.upsample_scale)
    g = g[None, None]
    for name, x, cols, y in reversed(cache["head"]):
        g = g * (y > 0)
        g, grads[name + ".w"], grads[name + ".b"] = conv_backward_raw(x, params[name + ".w"], g, cols=cols)
    d = cache["tdepth"]
    g = np.repeat(g / d, d, axis=1)
    for k in reversed(range(cfg.dstb_count)):
        s, t = cfg.dstb_configs()[k]
        g, gk = blocks.dstb_backward(g, s, t, params, cache["dstb"][k], f"dstb{k}")
        grads.update(gk)
    for item in reversed(cache["bb"]):
        if item[0] == POOL:
            g = maxpool2_backward(g, item[1])
        else:
            name, x, cols, y = item
            g = g * (y > 0)
            g, grads[name + ".w"], grads[name + ".b"] = conv_backward_raw(x, params[name + ".w"], g,
                                                                          cols=cols)
    return {k: grads[k] for k in params}


def attention_weights(clip, cfg: ModelConfig, params):
    """Per-block gate vectors for one clip: list of (block_id, alpha) with alpha [C] or [C, D]."""
    _, cache = forward(clip, cfg, params, return_cache=True)
    out = []
    for k, c in enumerate(cache["dstb"]):
        out.append((f"dstb{k}.dsb", c["alpha_s"]))
        out.append((f"dstb{k}.dtb", c["alpha_t"]))
    return out


def count_params(cfg: ModelConfig) -> dict:
    """Per-layer parameter table plus decomposition ratios for every temporal stage."""
    shapes = param_shapes(cfg)
    layers = {}
    for name, shape in shapes.items():
        layer = name.rsplit(".", 1)[0]
        layers[layer] = layers.get(layer, 0) + int(np.prod(shape))
    groups = {}
    for layer, n in layers.items():
        g = layer.split(".")[0]
        groups[g] = groups.get(g, 0) + n
    stages = []
    for k, (s, t) in enumerate(cfg.dstb_configs()):
        for i, r in enumerate(t.dilation_rates):
            dc = decomposition_param_count(3, 3, 3, t.bottleneck_channels, t.growth_channels, bias=False)
            stages.append({"stage": f"dstb{k}.dtb.dil{i}", "dilation": r,
                           "c_in": t.bottleneck_channels, "c_out": t.growth_channels,
                           "full3d": dc["full3d"], "decomposed": dc["decomposed"], "ratio": dc["ratio"],
                           "kernel_ratio": (3 * 3 + 3) / 27})
    total = sum(layers.values())
    return {"total": total, "per_layer": layers, "per_group": groups, "stages": stages,
            "decomposed_vs_full3d_ratio": max((st["ratio"] for st in stages), default=1.0)}
