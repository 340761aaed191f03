"""File formats (annotation JSON, density rasters, checkpoints), the synthetic
moving-crowd generator and T-frame clip assembly.

Annotation JSON::

    {"size": [H, W], "frames": [{"id": 0, "points": [[x, y], ...]}, ...]}

with x = column and y = row in pixels.

Density raster ``.dmap``: ``b"DMAP"``, u32 H, u32 W, then H*W little-endian
float32 values in row-major order.

Checkpoint ``.stdn``: ``b"STDN"``, u32 format version, u32 byte length of the
canonical config JSON, the JSON bytes, then until EOF one record per tensor:
u32 name length, UTF-8 name, u32 rank, rank x u32 dims, little-endian float32
data.  All integers are little-endian.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .density import DensityMap, DotAnnotations, density_for, hflip
from .model import ModelConfig

DMAP_MAGIC = b"DMAP"
CKPT_MAGIC = b"STDN"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


# -- annotations -------------------------------------------------------------

def parse_annotations(obj) -> list[DotAnnotations]:
    if not isinstance(obj, dict) or "frames" not in obj or "size" not in obj:
        raise FormatError("annotation JSON needs 'size' and 'frames' keys")
    size = obj["size"]
    if not (isinstance(size, list) and len(size) == 2 and all(isinstance(v, int) and v > 0 for v in size)):
        raise FormatError(f"'size' must be [H, W] positive integers, got {size!r}")
    h, w = size
    out = []
    for n, fr in enumerate(obj["frames"]):
        fid = fr.get("id", n) if isinstance(fr, dict) else n
        try:
            pts = np.asarray(fr["points"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"frame {fid}: malformed points ({exc})") from None
        if pts.size and (pts.ndim != 2 or pts.shape[1] != 2):
            raise FormatError(f"frame {fid}: points must be [[x, y], ...]")
        pts = pts.reshape(-1, 2)
        for x, y in pts:
            if not (np.isfinite(x) and np.isfinite(y) and 0 <= x < w and 0 <= y < h):
                raise FormatError(f"frame {fid}: point [{x:g}, {y:g}] out of bounds for size [{h}, {w}]")
        out.append(DotAnnotations(int(fid), pts, (h, w)))
    return out


def load_annotations(path) -> list[DotAnnotations]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    return parse_annotations(obj)


def annotations_to_json(anns: list[DotAnnotations], size=None) -> dict:
    if size is None:
        if not anns:
            raise ValueError("size is required for an empty annotation list")
        size = anns[0].image_size
    return {"size": [int(v) for v in size],
            "frames": [{"id": a.frame_id, "points": a.points.tolist()} for a in anns]}


def save_annotations(path, anns, size=None):
    Path(path).write_text(json.dumps(annotations_to_json(anns, size)))


# -- density rasters ---------------------------------------------------------

def export_density(dm, path, fmt: str | None = None):
    values = np.asarray(getattr(dm, "values", dm))
    if values.ndim != 2:
        raise ValueError(f"density map must be 2D, got {values.shape}")
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "dmap")
    if fmt == "dmap":
        h, w = values.shape
        payload = DMAP_MAGIC + struct.pack("<II", h, w) + values.astype("<f4").tobytes()
        path.write_bytes(payload)
    elif fmt == "csv":
        lines = [",".join(repr(float(v)) for v in row) for row in values.astype(np.float32)]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown density format {fmt!r}")


def load_density(path, fmt: str | None = None) -> DensityMap:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "dmap")
    if fmt == "csv":
        return DensityMap(np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float32))
    raw = path.read_bytes()
    if raw[:4] != DMAP_MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: not a DMAP file")
    h, w = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * h * w:
        raise FormatError(f"{path}: payload is {len(raw) - 12} bytes, expected {4 * h * w}")
    return DensityMap(np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float32))


# -- checkpoints -------------------------------------------------------------

def checkpoint_bytes(cfg: ModelConfig, params: dict) -> bytes:
    blob = cfg.to_json().encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
    for name, arr in params.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, cfg: ModelConfig, params: dict):
    Path(path).write_bytes(checkpoint_bytes(cfg, params))


def load_checkpoint(path):
    """Returns ``(ModelConfig, params)``; params come back in the config's dtype."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an STDN checkpoint")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig.from_dict(json.loads(raw[off:off + n]))
    off += n
    params = {}
    while off < len(raw):
        (ln,) = struct.unpack_from("<I", raw, off)
        name = raw[off + 4:off + 4 + ln].decode()
        off += 4 + ln
        (rank,) = struct.unpack_from("<I", raw, off)
        dims = struct.unpack_from(f"<{rank}I", raw, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(dims))
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
        params[name] = arr.astype(cfg.np_dtype)
        off += 4 * size
    return cfg, params


# -- clips and datasets ------------------------------------------------------

@dataclass
class Clip:
    frames: np.ndarray  # [T, C, H, W]
    ann: DotAnnotations  # last frame


@dataclass
class ClipDataset:
    clips: list[Clip]
    T: int
    preset: str = "synthetic"
    sigma_mode: str = "fixed:3"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = {c.frames.shape[1:] for c in self.clips}
        if len(sizes) > 1:
            raise ValueError(f"non-uniform frame sizes in dataset: {sorted(sizes)}")
        for i, c in enumerate(self.clips):
            if c.frames.shape[0] != self.T:
                raise ValueError(f"clip {i} has {c.frames.shape[0]} frames, expected T={self.T}")

    def __len__(self):
        return len(self.clips)

    def density(self, i: int, flipped: bool = False) -> np.ndarray:
        ann = self.clips[i].ann
        return density_for(hflip(ann) if flipped else ann, self.sigma_mode).values

    def split(self, val_fraction: float = 0.2):
        """Leading clips for training, the last ``val_fraction`` for validation."""
        n_val = int(round(len(self) * val_fraction))
        if len(self) > 1:
            n_val = min(max(n_val, 1), len(self) - 1)
        cut = len(self) - n_val
        mk = lambda cl: ClipDataset(cl, self.T, self.preset, self.sigma_mode, dict(self.meta))
        return mk(self.clips[:cut]), mk(self.clips[cut:])


def make_clips(frames, annotations: list[DotAnnotations], T: int, stride: int = 1) -> list[Clip]:
    """Sliding windows of T frames; each clip keeps the annotations of its last frame."""
    frames = np.asarray(frames)
    n = len(frames)
    if len(annotations) != n:
        raise ValueError(f"{n} frames but {len(annotations)} annotation entries")
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be >= 1")
    if T > n:
        raise ValueError(f"T={T} exceeds the {n} available frames")
    return [Clip(frames[e - T + 1:e + 1], annotations[e]) for e in range(T - 1, n, stride)]


@dataclass
class SynthSpec:
    n_people: tuple[int, int] = (2, 10)
    speed: tuple[float, float] = (0.0, 2.0)
    image_size: tuple[int, int] = (32, 32)
    frames_per_sequence: int = 10
    n_sequences: int = 40
    T: int = 10
    stride: int = 10
    seed: int = 0
    blob_sigma: float = 1.5
    amplitude: float = 1.0
    noise_std: float = 0.0
    channels: int = 1
    sigma_mode: str = "fixed:3"

    def __post_init__(self):
        self.n_people = tuple(self.n_people)
        self.speed = tuple(self.speed)
        self.image_size = tuple(self.image_size)
        if self.speed[0] < 0 or self.speed[1] < self.speed[0]:
            raise ValueError(f"bad speed range {self.speed}")
        if self.n_people[0] < 0 or self.n_people[1] < self.n_people[0]:
            raise ValueError(f"bad people range {self.n_people}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _reflect(p, length):
    # fold the real line onto [0, length]
    if length <= 0:
        return np.zeros_like(p)
    period = 2.0 * length
    m = np.mod(p, period)
    return np.where(m <= length, m, period - m)


def synth_sequence(spec: SynthSpec, rng: np.random.Generator):
    """One sequence: frames [F, C, H, W], per-frame annotations, and the tracks [F, N, 2]."""
    h, w = spec.image_size
    n = int(rng.integers(spec.n_people[0], spec.n_people[1] + 1))
    start = rng.uniform([0.0, 0.0], [w - 1.0, h - 1.0], size=(n, 2))
    speed = rng.uniform(spec.speed[0], spec.speed[1], size=n)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    vel = np.stack([speed * np.cos(theta), speed * np.sin(theta)], axis=1)
    t = np.arange(spec.frames_per_sequence, dtype=np.float64)[:, None, None]
    raw = start[None] + t * vel[None]
    tracks = np.stack([_reflect(raw[..., 0], w - 1.0), _reflect(raw[..., 1], h - 1.0)], axis=-1)
    yy, xx = np.mgrid[0:h, 0:w]
    frames = np.zeros((spec.frames_per_sequence, spec.channels, h, w), dtype=np.float32)
    anns = []
    for f in range(spec.frames_per_sequence):
        img = np.zeros((h, w))
        for x, y in tracks[f]:
            img += spec.amplitude * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * spec.blob_sigma ** 2))
        if spec.noise_std > 0:
            img += rng.normal(0.0, spec.noise_std, size=img.shape)
        frames[f] = img[None].astype(np.float32)
        anns.append(DotAnnotations(f, tracks[f], (h, w)))
    return frames, anns, {"velocities": vel, "tracks": tracks}


def gen_synthetic(spec: SynthSpec) -> ClipDataset:
    """Deterministic for a fixed ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    clips, tracks = [], []
    for s in range(spec.n_sequences):
        frames, anns, info = synth_sequence(spec, rng)
        for c in make_clips(frames, anns, spec.T, spec.stride):
            c.ann = DotAnnotations(len(clips), c.ann.points, c.ann.image_size)
            clips.append(c)
        tracks.append(info)
    ds = ClipDataset(clips, spec.T, "synthetic", spec.sigma_mode, {"synth": spec.to_dict()})
    ds.tracks = tracks
    return ds


def save_dataset(ds: ClipDataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ds.clips:
        frames = np.stack([c.frames for c in ds.clips]).astype(np.float32)
        size = ds.clips[0].frames.shape[2:]
    else:
        frames = np.zeros((0, ds.T, 1, 1, 1), np.float32)
        size = (1, 1)
    np.save(out / "frames.npy", frames)
    save_annotations(out / "annotations.json", [c.ann for c in ds.clips], size)
    meta = {"T": ds.T, "preset": ds.preset, "sigma_mode": ds.sigma_mode, "n_clips": len(ds), **ds.meta}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(path) -> ClipDataset:
    p = Path(path)
    meta = json.loads((p / "dataset.json").read_text())
    frames = np.load(p / "frames.npy")
    anns = load_annotations(p / "annotations.json")
    if len(anns) != len(frames):
        raise FormatError(f"{p}: {len(frames)} clips but {len(anns)} annotation frames")
    extra = {k: v for k, v in meta.items() if k not in ("T", "preset", "sigma_mode", "n_clips")}
    return ClipDataset([Clip(f, a) for f, a in zip(frames, anns)], meta["T"], meta["preset"],
                       meta["sigma_mode"], extra)


def load_clip(path, index: int = 0) -> np.ndarray:
    """A clip ``[T, C, H, W]`` from a dataset dir (by index) or a dir holding ``frames.npy``."""
    p = Path(path)
    if (p / "dataset.json").exists():
        return load_dataset(p).clips[index].frames
    frames = np.load(p / "frames.npy" if p.is_dir() else p)
    return frames[index] if frames.ndim == 5 else frames
