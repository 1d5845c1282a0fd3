"""Long-tailed datasets built from balanced pools.

Class ``c`` of a long-tailed split keeps ``round(n * mu**c)`` samples where
``mu = rho ** (-1 / (C - 1))``, so class 0 is the head and class ``C - 1`` the
tail. Two procedural image families stand in for a pair of related natural
image datasets: ``"A"`` renders oriented colour gratings, ``"B"`` renders
coloured shapes.
"""

from __future__ import annotations

import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANY, MEDIUM, FEW = "Many", "Medium", "Few"
DEFAULT_BINS = (20, 100)
VAL_PER_CLASS = 50
DOMAINS = ("A", "B")
_DOMAIN_ALIASES = {"textures": "A", "shapes": "B"}


@dataclass(frozen=True)
class LongTailProfile:
    counts: tuple[int, ...]
    mu: float
    rho: float
    requested_rho: float
    warning: str | None = None

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x C x H x W, float32
    labels: np.ndarray  # N, int64
    num_classes: int
    split: str = "train"
    domain: str = "A"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(
                f"images {self.images.shape} and labels {self.labels.shape} disagree"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, idx) -> "LabeledDataset":
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.num_classes, self.split, self.domain, dict(self.meta)
        )

    @property
    def dataset_id(self) -> str:
        return self.meta.get("id", f"{self.domain}-{self.split}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def longtail_profile(n: int, num_classes: int, rho: float) -> LongTailProfile:
    if n < 1 or num_classes < 2 or rho < 1:
        raise ValueError("need n >= 1, num_classes >= 2, rho >= 1")
    mu = float(rho) ** (-1.0 / (num_classes - 1))
    raw = [n * mu**c for c in range(num_classes)]
    counts = tuple(max(1, _round_half_up(r)) for r in raw)
    warning = None
    if _round_half_up(raw[-1]) < 1:
        warning = f"tail class rounds to {raw[-1]:.3g} samples and was clamped to 1"
    return LongTailProfile(counts, mu, counts[0] / counts[-1], float(rho), warning)


def subsample(pool: LabeledDataset, profile: LongTailProfile, seed: int) -> LabeledDataset:
    """Draw exactly ``profile.counts[j]`` examples of class ``j`` without replacement."""
    if profile.num_classes > pool.num_classes:
        raise ValueError(
            f"profile has {profile.num_classes} classes but the pool only {pool.num_classes}"
        )
    rng = np.random.default_rng(seed)
    have = pool.class_counts()
    picked = []
    for j, need in enumerate(profile.counts):
        if have[j] < need:
            raise ValueError(f"class {j} has {have[j]} pool examples, profile needs {need}")
        idx = np.flatnonzero(pool.labels == j)
        picked.append(idx[rng.permutation(len(idx))[:need]])
    order = np.concatenate(picked)
    order = order[rng.permutation(len(order))]
    out = pool.take(order)
    out.meta["rho"] = profile.rho
    return out


def class_bins(counts: Sequence[int], thresholds: tuple[int, int] = DEFAULT_BINS) -> list[str]:
    """Many if count > hi, Few if count < lo, else Medium (closed interval)."""
    lo, hi = thresholds
    if not lo < hi:
        raise ValueError(f"thresholds must satisfy lo < hi, got {thresholds}")
    return [MANY if c > hi else FEW if c < lo else MEDIUM for c in counts]


# ------------------------------------------------------------------ synthetic


def _domain_key(domain: str) -> str:
    d = _DOMAIN_ALIASES.get(domain, domain)
    if d not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    return d


def _class_rng(domain: str, num_classes: int) -> np.random.Generator:
    # Class definitions depend only on (domain, C), never on the sample seed.
    return np.random.default_rng([zlib.crc32(domain.encode()), num_classes])


def _grid(size: int):
    ax = np.linspace(-1.0, 1.0, size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def _sample_colour(rng, n, channels):
    # Per-sample colour, independent of the class: labels are carried by
    # spatial structure alone, so the network cannot shortcut on pixel means.
    c = rng.normal(0, 1, (n, channels))
    return c / np.linalg.norm(c, axis=1, keepdims=True) * np.sqrt(channels)


def _render_gratings(labels, size, channels, rng, num_classes, noise):
    crng = _class_rng("A", num_classes)
    theta = np.pi * (np.arange(num_classes) / num_classes) + crng.uniform(0, 0.1, num_classes)
    freq = crng.choice([1.0, 1.5, 2.0, 3.0], size=num_classes)
    yy, xx = _grid(size)
    n = len(labels)
    th = theta[labels] + rng.normal(0, 0.12, n)
    fr = freq[labels] * rng.uniform(0.85, 1.15, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    proj = xx[None] * np.cos(th)[:, None, None] + yy[None] * np.sin(th)[:, None, None]
    wave = np.sin(np.pi * fr[:, None, None] * proj + phase[:, None, None])
    amp = rng.uniform(0.5, 1.0, n)
    colour = _sample_colour(rng, n, channels)
    offset = rng.normal(0, 0.3, (n, channels))
    img = colour[:, :, None, None] * (amp[:, None, None] * wave)[:, None] + offset[:, :, None, None]
    return img + rng.normal(0, noise, img.shape)


_SHAPES = ("disk", "square", "ring", "cross", "hbar", "vbar", "diamond", "xshape")


def _shape_mask(kind, dx, dy, r):
    if kind == "disk":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "ring":
        d = np.sqrt(dx**2 + dy**2)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "cross":
        return ((np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)) | ((np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r))
    if kind == "hbar":
        return (np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= 1.2 * r)
    if kind == "vbar":
        return (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= 1.2 * r)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    return (np.abs(np.abs(dx) - np.abs(dy)) <= 0.3 * r) & (np.abs(dx) <= r)


def _render_shapes(labels, size, channels, rng, num_classes, noise):
    # Class c is shape c mod 8 in size band c // 8 (bands alternate small/large).
    kinds = [_SHAPES[c % len(_SHAPES)] for c in range(num_classes)]
    band = np.array([(c // len(_SHAPES)) % 2 for c in range(num_classes)])
    yy, xx = _grid(size)
    n = len(labels)
    img = np.empty((n, channels, size, size))
    cx = rng.uniform(-0.2, 0.2, n)
    cy = rng.uniform(-0.2, 0.2, n)
    rad = np.where(band[labels] == 0, rng.uniform(0.6, 0.8, n), rng.uniform(0.35, 0.5, n))
    contrast = rng.uniform(1.5, 2.0, n)
    colour = _sample_colour(rng, n, channels)
    offset = rng.normal(0, 0.3, (n, channels))
    for i, c in enumerate(labels):
        m = _shape_mask(kinds[c], yy - cy[i], xx - cx[i], rad[i]).astype(np.float64)
        img[i] = offset[i][:, None, None] + contrast[i] * colour[i][:, None, None] * m[None]
    return img + rng.normal(0, noise, img.shape)


_RENDERERS = {"A": _render_gratings, "B": _render_shapes}


def gen_synthetic(
    domain: str,
    counts: Sequence[int],
    image_size: int = 16,
    seed: int = 0,
    channels: int = 3,
    val_per_class: int = VAL_PER_CLASS,
    noise: float = 0.6,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Render a train split with the given per-class counts plus a balanced val split."""
    key = _domain_key(domain)
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("counts must be nonnegative")
    num_classes = len(counts)
    rng = np.random.default_rng([seed, zlib.crc32(key.encode())])
    render = _RENDERERS[key]

    def make(cnts, split):
        labels = np.repeat(np.arange(num_classes), cnts)
        labels = labels[rng.permutation(len(labels))]
        if len(labels):
            imgs = render(labels, image_size, channels, rng, num_classes, noise)
        else:
            imgs = np.zeros((0, channels, image_size, image_size))
        return LabeledDataset(
            imgs.astype(np.float32), labels, num_classes, split, key, {"seed": seed, "id": f"{key}-{split}"}
        )

    train = make(counts, "train")
    val = make([val_per_class] * num_classes, "val")
    return train, val


def make_longtail(
    domain: str,
    n: int,
    num_classes: int,
    rho: float,
    image_size: int = 16,
    seed: int = 0,
    val_per_class: int = VAL_PER_CLASS,
    noise: float = 0.6,
) -> tuple[LabeledDataset, LabeledDataset, LongTailProfile]:
    """Balanced pool of ``n`` per class, subsampled to an ``rho`` long tail."""
    profile = longtail_profile(n, num_classes, rho)
    if profile.warning:
        warnings.warn(profile.warning, stacklevel=2)
    pool, val = gen_synthetic(domain, [n] * num_classes, image_size, seed, val_per_class=val_per_class, noise=noise)
    train = pool if profile.rho == 1 else subsample(pool, profile, seed)
    tag = f"{_domain_key(domain)}-{rho:g}x"
    train.meta["id"] = tag
    val.meta["id"] = f"{tag}-val"
    return train, val, profile


# --------------------------------------------------------------- file formats

_IMBD_MAGIC = b"IMBD"
_IMBD_VERSION = 1


class DatasetFileError(ValueError):
    pass


def save_dataset(ds: LabeledDataset, path) -> None:
    n, c, h, w = ds.images.shape
    header = _IMBD_MAGIC + struct.pack("<5I", _IMBD_VERSION, n, c, h, w)
    body = ds.labels.astype("<u4").tobytes() + ds.images.astype("<f4").tobytes()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)


def load_dataset(path, num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _IMBD_MAGIC:
        raise DatasetFileError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 24:
        raise DatasetFileError(f"{path}: truncated header")
    version, n, c, h, w = struct.unpack_from("<5I", raw, 4)
    if version != _IMBD_VERSION:
        raise DatasetFileError(f"{path}: unsupported version {version}")
    need = 24 + 4 * n + 4 * n * c * h * w
    if len(raw) != need:
        raise DatasetFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, "<u4", n, 24).astype(np.int64)
    images = np.frombuffer(raw, "<f4", n * c * h * w, 24 + 4 * n).reshape(n, c, h, w)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 0)
    return LabeledDataset(images.astype(np.float32), labels, k, split, "file", {"id": Path(path).stem})


def load_cifar_binary(paths, fine_labels: bool = True, num_classes: int | None = None) -> LabeledDataset:
    """Read CIFAR-10 (1 label byte) or CIFAR-100 (coarse+fine bytes) binary batches.

    The label width is inferred from the record size of the first file.
    Pixels are scaled to [0, 1] and standardized per channel.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    imgs, labs = [], []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % 3073 == 0:
            rec = raw.reshape(-1, 3073)
            labs.append(rec[:, 0])
            imgs.append(rec[:, 1:])
        elif raw.size % 3074 == 0:
            rec = raw.reshape(-1, 3074)
            labs.append(rec[:, 1] if fine_labels else rec[:, 0])
            imgs.append(rec[:, 2:])
        else:
            raise DatasetFileError(f"{p}: size {raw.size} is not a whole number of CIFAR records")
    x = np.concatenate(imgs).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = np.concatenate(labs).astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return LabeledDataset(x, y, k, "train", "cifar")
