"""Pixel-wise L2 loss, patch-wise regression loss (PRL) and count metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class PRLConfig:
    n_p: int = 3
    lambdas: tuple[float, ...] = (1.0, 15.0, 3.0)
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if len(self.lambdas) != self.n_p:
            raise ValueError(f"need {self.n_p} lambdas, got {len(self.lambdas)}")
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambdas must be nonnegative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class LossReport:
    total: float
    kind: str
    per_patch: list[tuple[int, float, float]] = field(default_factory=list)

    def component(self, z):
        for zz, _, v in self.per_patch:
            if zz == z:
                return v
        return None


def _as_arrays(pred, gt):
    pred = [getattr(p, "values", p) for p in pred]
    gt = [getattr(g, "values", g) for g in gt]
    if len(pred) != len(gt) or not pred:
        raise ShapeError(f"need equal nonempty batches, got {len(pred)} preds and {len(gt)} targets")
    for p, g in zip(pred, gt):
        if p.shape != g.shape:
            raise ShapeError(f"raster shape mismatch: {p.shape} vs {g.shape}")
    return pred, gt


def pixelwise_l2(pred, gt):
    """(1 / 2N_b) sum_i ||pred_i - gt_i||^2; returns ``(report, grads)``."""
    pred, gt = _as_arrays(pred, gt)
    nb = len(pred)
    diffs = [p - g for p, g in zip(pred, gt)]
    total = sum(float((d * d).sum()) for d in diffs) / (2 * nb)
    return LossReport(total, "pixelwise_l2"), [d / nb for d in diffs]


@lru_cache(maxsize=32)
def _kernel(z: int, sigma: float) -> np.ndarray:
    off = np.arange(-(z - 1), z)
    g = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / (2.0 * sigma * sigma))
    g = g / g.sum()
    g.setflags(write=False)
    return g


def smoothing_kernel(z: int, sigma: float = 1.0) -> np.ndarray:
    """Normalised (2z-1) x (2z-1) Gaussian sampled at integer offsets."""
    if z < 1:
        raise ValueError("z must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return _kernel(int(z), float(sigma)).copy()


def smooth(d, kernel):
    """Same-size, zero-padded correlation of the last two axes of ``d`` with ``kernel``."""
    k = kernel.shape[0]
    if k == 1:
        return d * kernel[0, 0]
    p = k // 2
    h, w = d.shape[-2:]
    pad = [(0, 0)] * (d.ndim - 2) + [(p, p), (p, p)]
    dp = np.pad(d, pad)
    out = np.zeros_like(d, dtype=np.result_type(d, kernel))
    for i in range(k):
        for j in range(k):
            out += kernel[i, j] * dp[..., i:i + h, j:j + w]
    return out


def prl(pred, gt, cfg: PRLConfig = PRLConfig()):
    """Weighted sum over z of (1/N_b) sum_i ||G_z * pred_i - G_z * gt_i||_1.

    Returns ``(report, grads)``; the L1 subgradient at zero is taken as zero.
    """
    pred, gt = _as_arrays(pred, gt)
    nb = len(pred)
    diffs = [p - g for p, g in zip(pred, gt)]
    grads = [np.zeros_like(d) for d in diffs]
    per_patch = []
    total = 0.0
    for z, lam in zip(range(1, cfg.n_p + 1), cfg.lambdas):
        g_z = _kernel(z, float(cfg.sigma))
        val = 0.0
        for i, d in enumerate(diffs):
            # G * pred - G * gt == G * (pred - gt) by linearity
            sd = smooth(d, g_z)
            val += float(np.abs(sd).sum())
            if lam:
                # adjoint of zero-padded correlation is correlation with the flipped kernel
                grads[i] += (lam / nb) * smooth(np.sign(sd), g_z[::-1, ::-1])
        val /= nb
        per_patch.append((z, lam, val))
        total += lam * val
    return LossReport(total, "prl", per_patch), grads


def l1_pixel(pred, gt):
    pred, gt = _as_arrays(pred, gt)
    return sum(float(np.abs(p - g).sum()) for p, g in zip(pred, gt)) / len(pred)


def compute_loss(kind: str, pred, gt, cfg: PRLConfig = PRLConfig()):
    if kind in ("prl",):
        return prl(pred, gt, cfg)
    if kind in ("l2", "pixelwise_l2"):
        return pixelwise_l2(pred, gt)
    raise ValueError(f"unknown loss kind {kind!r}")


def mae_mse(preds, gts):
    """MAE and root-mean-square count error."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    g = np.asarray(gts, dtype=np.float64).reshape(-1)
    if p.size == 0 or p.shape != g.shape:
        raise ValueError(f"need equal nonempty count lists, got {p.size} and {g.size}")
    e = p - g
    return float(np.abs(e).mean()), float(np.sqrt((e * e).mean()))
