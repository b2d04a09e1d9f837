"""Few-shot image datasets: the FSDS container, a synthetic generator and batch normalisation.

FSDS layout (little-endian)::

    "FSDS" | version u32 | N u32 | H u32 | W u32 | C u32 | num_classes u32
    per class: name_len u16 | utf-8 name | split u8 (0 base, 1 val, 2 novel)
    channel_mean f32[C] | channel_std f32[C] | labels u16[N] | pixels u8[N*H*W*C]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .noise import Rng

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1
SPLITS = {"base": 0, "val": 1, "novel": 2}


class FsdsError(ValueError):
    pass


class BadMagicError(FsdsError):
    pass


class VersionMismatchError(FsdsError):
    pass


class TruncatedPayloadError(FsdsError):
    pass


class LabelRangeError(FsdsError):
    pass


@dataclass
class FewShotDataset:
    images: np.ndarray  # N x H x W x C uint8
    labels: np.ndarray  # N uint16
    class_names: List[str]
    splits: List[int]  # per class: 0 base, 1 val, 2 novel
    channel_mean: np.ndarray  # C float32, in [0, 1] pixel units
    channel_std: np.ndarray

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        self.channel_mean = np.asarray(self.channel_mean, dtype=np.float32)
        self.channel_std = np.asarray(self.channel_std, dtype=np.float32)
        self.validate()

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise FsdsError(f"images must be N x H x W x C, got shape {self.images.shape}")
        n, _, _, c = self.images.shape
        if self.labels.shape != (n,):
            raise FsdsError(f"expected {n} labels, got {self.labels.shape[0]}")
        if len(self.class_names) != len(self.splits):
            raise FsdsError("class_names and splits differ in length")
        if n and int(self.labels.max()) >= self.num_classes:
            raise LabelRangeError(f"label {int(self.labels.max())} >= number of classes {self.num_classes}")
        if any(s not in (0, 1, 2) for s in self.splits):
            raise FsdsError(f"split tags must be 0, 1 or 2, got {sorted(set(self.splits))}")
        if self.channel_mean.shape != (c,) or self.channel_std.shape != (c,):
            raise FsdsError("channel statistics must have one entry per channel")
        # a class carries exactly one split tag, so base and novel cannot overlap
        # as long as names are unique
        if len(set(self.class_names)) != len(self.class_names):
            raise FsdsError("class names must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def classes_in(self, split: str) -> List[int]:
        tag = SPLITS[split]
        return [i for i, s in enumerate(self.splits) if s == tag]

    def indices_by_class(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.num_classes)]

    def split_arrays(self, split: str = "base"):
        """(indices, labels remapped to 0..k-1) for all images of a split."""
        classes = self.classes_in(split)
        remap = {c: i for i, c in enumerate(classes)}
        idx = np.flatnonzero(np.isin(self.labels, classes))
        return idx, np.array([remap[int(l)] for l in self.labels[idx]], dtype=np.int64)


def write_fsds(ds: FewShotDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(fsds_bytes(ds))


def fsds_bytes(ds: FewShotDataset) -> bytes:
    ds.validate()
    n, h, w, c = ds.images.shape
    parts = [FSDS_MAGIC, struct.pack("<6I", FSDS_VERSION, n, h, w, c, ds.num_classes)]
    for name, split in zip(ds.class_names, ds.splits):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", split))
    parts.append(ds.channel_mean.astype("<f4").tobytes())
    parts.append(ds.channel_std.astype("<f4").tobytes())
    parts.append(ds.labels.astype("<u2").tobytes())
    parts.append(ds.images.tobytes())
    return b"".join(parts)


def parse_fsds(data: bytes) -> FewShotDataset:
    pos = 0

    def take(k: int) -> bytes:
        nonlocal pos
        if pos + k > len(data):
            raise TruncatedPayloadError(f"truncated payload: need {pos + k} bytes, file has {len(data)}")
        out = data[pos:pos + k]
        pos += k
        return out

    if len(data) < 4 or data[:4] != FSDS_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {FSDS_MAGIC!r}")
    pos = 4
    (version,) = struct.unpack("<I", take(4))
    if version != FSDS_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {FSDS_VERSION}")
    n, h, w, c, num_classes = struct.unpack("<5I", take(20))
    names, splits = [], []
    for _ in range(num_classes):
        (ln,) = struct.unpack("<H", take(2))
        names.append(take(ln).decode("utf-8"))
        (tag,) = struct.unpack("<B", take(1))
        splits.append(tag)
    mean = np.frombuffer(take(4 * c), dtype="<f4").astype(np.float32)
    std = np.frombuffer(take(4 * c), dtype="<f4").astype(np.float32)
    labels = np.frombuffer(take(2 * n), dtype="<u2").astype(np.uint16)
    pixels = np.frombuffer(take(n * h * w * c), dtype=np.uint8).reshape(n, h, w, c)
    if pos != len(data):
        raise FsdsError(f"{len(data) - pos} trailing bytes after payload")
    if n and int(labels.max()) >= num_classes:
        raise LabelRangeError(f"label {int(labels.max())} >= number of classes {num_classes}")
    return FewShotDataset(pixels.copy(), labels, names, splits, mean, std)


def load_fsds(path) -> FewShotDataset:
    with open(path, "rb") as fh:
        return parse_fsds(fh.read())


def channel_stats(images: np.ndarray):
    """Per-channel mean and std of pixel/255 over a set of images."""
    px = images.reshape(-1, images.shape[-1]).astype(np.float64) / 255.0
    mean = px.mean(axis=0)
    std = px.std(axis=0)
    std[std < 1e-6] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def normalize_batch(ds: FewShotDataset, indices) -> np.ndarray:
    """(pixel/255 - mean) / std per channel, as an N x H x W x C float32 array."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = ds.images.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"index out of range for dataset of {n} images")
    x = ds.images[idx].astype(np.float32) / np.float32(255.0)
    return (x - ds.channel_mean) / ds.channel_std


# ----------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic few-shot dataset.

    Every class is a fixed arrangement of ``parts_per_class`` coloured
    primitives drawn from a vocabulary shared by all classes, so features
    learnt on base classes carry over to novel ones. Per image the parts
    jitter in position, size and colour, unrelated distractor primitives
    are scattered in, and Gaussian pixel noise is added.
    """

    num_classes: int = 8
    samples_per_class: int = 100
    image_size: int = 32
    channels: int = 3
    num_novel: int = 4
    num_val: int = 0
    parts_per_class: int = 2
    jitter: float = 2.0
    scale_jitter: float = 0.2
    color_jitter: float = 0.15
    distractors: int = 1
    pixel_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.num_novel + self.num_val >= self.num_classes:
            raise ValueError("need at least one base class")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


_SHAPES = ("disk", "square", "ring", "hbar", "vbar", "cross")


def _primitive(kind: str, yy, xx, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        d = np.sqrt(dy * dy + dx * dx) - r
    elif kind == "square":
        d = np.maximum(np.abs(dy), np.abs(dx)) - r
    elif kind == "ring":
        d = np.abs(np.sqrt(dy * dy + dx * dx) - r) - 0.35 * r
    elif kind == "hbar":
        d = np.maximum(np.abs(dy) - 0.35 * r, np.abs(dx) - 1.3 * r)
    elif kind == "vbar":
        d = np.maximum(np.abs(dx) - 0.35 * r, np.abs(dy) - 1.3 * r)
    else:  # cross
        d = np.minimum(np.maximum(np.abs(dy) - 0.3 * r, np.abs(dx) - 1.2 * r),
                       np.maximum(np.abs(dx) - 0.3 * r, np.abs(dy) - 1.2 * r))
    return np.clip(0.5 - d, 0.0, 1.0)  # anti-aliased coverage


def _palette(channels: int) -> np.ndarray:
    base = np.array([[1, 0.1, 0.1], [0.1, 1, 0.1], [0.15, 0.3, 1], [1, 1, 0.1], [1, 0.2, 1], [0.1, 1, 1]])
    if channels == 3:
        return base
    return np.repeat(base.mean(axis=1, keepdims=True), channels, axis=1)


def synth_generate(spec: SynthSpec) -> FewShotDataset:
    """Deterministic dataset from ``spec``; base classes first, then val, then novel."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    palette = _palette(spec.channels)
    root = Rng(spec.seed, (7,))

    # class recipes: (shape, colour, centre y, centre x, radius) per part
    recipes = []
    seen = set()
    for k in range(spec.num_classes):
        crng = root.child(0, k)
        attempt = 0
        while True:
            u = crng.uniform(spec.parts_per_class * 5)
            parts = []
            for p in range(spec.parts_per_class):
                shape = int(u[5 * p] * len(_SHAPES))
                color = int(u[5 * p + 1] * len(palette))
                cy = s * (0.25 + 0.5 * u[5 * p + 2])
                cx = s * (0.25 + 0.5 * u[5 * p + 3])
                r = s * (0.12 + 0.08 * u[5 * p + 4])
                parts.append((shape, color, cy, cx, r))
            sig = tuple((p[0], p[1]) for p in parts)
            attempt += 1
            if sig not in seen or attempt > 20:
                seen.add(sig)
                break
        recipes.append(parts)

    n_base = spec.num_classes - spec.num_novel - spec.num_val
    splits = [0] * n_base + [1] * spec.num_val + [2] * spec.num_novel
    images = np.empty((spec.num_classes * spec.samples_per_class, s, s, spec.channels), dtype=np.uint8)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class).astype(np.uint16)
    i = 0
    for k, parts in enumerate(recipes):
        for j in range(spec.samples_per_class):
            irng = root.child(1, k, j)
            img = np.zeros((s, s, spec.channels))
            layers = [(p, True) for p in parts]
            for d in range(spec.distractors):
                u = irng.child(1, d).uniform(5)
                layers.append(((int(u[0] * len(_SHAPES)), int(u[1] * len(palette)),
                                s * u[2], s * u[3], s * (0.06 + 0.05 * u[4])), False))
            for li, ((shape, color, cy, cx, r), jitter) in enumerate(layers):
                z = irng.child(2, li).normal(4)
                if jitter:
                    cy = cy + spec.jitter * z[0]
                    cx = cx + spec.jitter * z[1]
                    r = r * (1.0 + spec.scale_jitter * z[2])
                col = palette[color] * (1.0 + spec.color_jitter * z[3])
                cov = _primitive(_SHAPES[shape], yy, xx, cy, cx, max(r, 1.0))
                img = img * (1.0 - cov[..., None]) + cov[..., None] * col
            img = img + spec.pixel_noise * irng.child(3).normal(img.size).reshape(img.shape)
            images[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            i += 1

    base_mask = np.isin(labels, [c for c, sp in enumerate(splits) if sp == 0])
    mean, std = channel_stats(images[base_mask])
    names = [f"class{k:02d}" for k in range(spec.num_classes)]
    return FewShotDataset(images, labels, names, splits, mean, std)


def nearest_class_mean_accuracy(ds: FewShotDataset, train_fraction: float = 0.5) -> float:
    """Raw-pixel nearest-class-mean accuracy with a per-class train/test split."""
    x = ds.images.reshape(ds.images.shape[0], -1).astype(np.float64)
    means, test_idx = [], []
    for k, idx in enumerate(ds.indices_by_class()):
        cut = max(1, int(len(idx) * train_fraction))
        means.append(x[idx[:cut]].mean(axis=0))
        test_idx.append(idx[cut:])
    means = np.stack(means)
    test = np.concatenate(test_idx)
    d = ((x[test][:, None, :] - means[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == ds.labels[test]))


def subset(ds: FewShotDataset, classes: Sequence[int]) -> FewShotDataset:
    """Dataset restricted to ``classes`` (labels renumbered in the given order)."""
    remap = {c: i for i, c in enumerate(classes)}
    idx = np.flatnonzero(np.isin(ds.labels, list(classes)))
    labels = np.array([remap[int(l)] for l in ds.labels[idx]], dtype=np.uint16)
    return FewShotDataset(ds.images[idx], labels, [ds.class_names[c] for c in classes],
                          [ds.splits[c] for c in classes], ds.channel_mean, ds.channel_std)
