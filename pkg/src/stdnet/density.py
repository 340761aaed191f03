"""Ground-truth density maps from dot annotations.

Each annotated head becomes a 2D Gaussian blob, truncated to a square window
of half-width ceil(4 sigma) and renormalised over the in-image pixels it
covers, so every blob integrates to exactly one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FIXED_SIGMA = 3.0
SIGMA_FLOOR = 0.5


@dataclass
class DotAnnotations:
    frame_id: int
    points: np.ndarray  # [N, 2] as (x = column, y = row)
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts
        self.image_size = tuple(int(v) for v in self.image_size)
        h, w = self.image_size
        for x, y in pts:
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"frame {self.frame_id}: point ({x}, {y}) outside image {w}x{h} (W x H)")

    def __len__(self):
        return len(self.points)


@dataclass
class DensityMap:
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def count(self) -> float:
        return float(self.values.sum())

    @property
    def shape(self):
        return self.values.shape


def knn_mean_distance(points, k: int) -> np.ndarray:
    """Mean distance from each point to its k nearest *other* points.

    With fewer than k others available, averages over all of them; a lone
    point gets NaN (callers apply their own fallback).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros(0)
    if n == 1:
        return np.array([np.nan])
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    kk = min(k, n - 1)
    out = np.empty(n)
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        # (distance, index) lexicographic order
        order = np.lexsort((others, d[i, others]))
        out[i] = d[i, others[order[:kk]]].mean()
    return out


def adaptive_sigmas(ann: DotAnnotations, beta: float = 0.3, k: int = 3) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = len(ann)
    if n == 0:
        return np.zeros(0)
    if n == 1:
        return np.array([FIXED_SIGMA])
    return np.maximum(beta * knn_mean_distance(ann.points, k), SIGMA_FLOOR)


def fixed_sigmas(ann: DotAnnotations, sigma: float = FIXED_SIGMA) -> np.ndarray:
    return np.full(len(ann), float(sigma))


def _blob(x, y, sigma, h, w):
    rad = math.ceil(4 * sigma)
    c0, c1 = max(math.ceil(x - rad), 0), min(math.floor(x + rad), w - 1)
    r0, r1 = max(math.ceil(y - rad), 0), min(math.floor(y + rad), h - 1)
    gx = np.exp(-((np.arange(c0, c1 + 1) - x) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((np.arange(r0, r1 + 1) - y) ** 2) / (2 * sigma * sigma))
    blob = np.outer(gy, gx)
    s = blob.sum()
    if s <= 0:
        # sigma so small that every sample underflowed: put the mass on the nearest pixel
        blob = np.zeros_like(blob)
        blob[min(max(round(y), r0), r1) - r0, min(max(round(x), c0), c1) - c0] = 1.0
        s = 1.0
    return (r0, r1 + 1, c0, c1 + 1), blob / s


def render_density(ann: DotAnnotations, sigma_per_point) -> DensityMap:
    sig = np.asarray(sigma_per_point, dtype=np.float64).reshape(-1)
    if len(sig) != len(ann):
        raise ValueError(f"got {len(sig)} sigmas for {len(ann)} points")
    if np.any(sig <= 0):
        raise ValueError("every sigma must be > 0")
    h, w = ann.image_size
    out = np.zeros((h, w))
    for (x, y), s in zip(ann.points, sig):
        (r0, r1, c0, c1), blob = _blob(x, y, s, h, w)
        out[r0:r1, c0:c1] += blob
    return DensityMap(out, {"frame_id": ann.frame_id})


def density_for(ann: DotAnnotations, sigma_mode: str = "fixed:3") -> DensityMap:
    """Render with a mode string: ``fixed:<sigma>`` or ``adaptive:<beta>,<k>``."""
    kind, _, arg = sigma_mode.partition(":")
    if kind == "fixed":
        return render_density(ann, fixed_sigmas(ann, float(arg or FIXED_SIGMA)))
    if kind == "adaptive":
        beta, k = (arg or "0.3,3").split(",")
        return render_density(ann, adaptive_sigmas(ann, float(beta), int(k)))
    raise ValueError(f"bad sigma mode {sigma_mode!r}; expected fixed:S or adaptive:B,K")


def hflip(ann: DotAnnotations) -> DotAnnotations:
    """Mirror about the centre column: x' = W - 1 - x.

    Points in (W-1, W) lie past the last pixel centre and would land at x' < 0;
    they are clamped to 0.
    """
    h, w = ann.image_size
    pts = ann.points.copy()
    pts[:, 0] = np.maximum((w - 1) - pts[:, 0], 0.0)
    return DotAnnotations(ann.frame_id, pts, ann.image_size)
