"""Image corpora, non-IID client partitioning and mini-batch iteration."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestionError

PACKED_MAGIC = b"FSEM"
_HEADER = struct.Struct("<4sIIII")
IMAGE_SUFFIXES = (".png", ".bmp", ".ppm", ".pgm", ".jpg", ".jpeg", ".gif", ".tif", ".tiff")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise IngestionError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise IngestionError("one label per image is required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise IngestionError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


# --------------------------------------------------------------------------
# ingestion


def write_packed(path: str | Path, images_u8: np.ndarray, labels: Sequence[int]) -> None:
    """Write ``(N, C, H, W)`` uint8 images and labels in packed-binary form."""
    imgs = np.ascontiguousarray(images_u8, dtype=np.uint8)
    n, c, h, w = imgs.shape
    lab = np.asarray(labels, dtype="<u2")
    if lab.shape != (n,):
        raise ValueError("one label per image is required")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PACKED_MAGIC, n, c, h, w))
        fh.write(imgs.tobytes())
        fh.write(lab.tobytes())


def _load_packed(path: Path) -> Dataset:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise IngestionError(f"{path}: truncated header")
    magic, n, c, h, w = _HEADER.unpack_from(blob)
    if magic != PACKED_MAGIC:
        raise IngestionError(f"{path}: bad magic {magic!r}")
    rec = c * h * w
    need = _HEADER.size + n * rec + 2 * n
    if len(blob) != need:
        # Name the first record the file cannot hold.
        have = max(0, len(blob) - _HEADER.size)
        bad = min(n - 1, have // rec) if rec else 0
        raise IngestionError(f"{path}: size {len(blob)} != expected {need} (record {bad} incomplete)")
    if n == 0:
        raise IngestionError(f"{path}: contains no records")
    pix = np.frombuffer(blob, dtype=np.uint8, count=n * rec, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=_HEADER.size + n * rec)
    images = pix.reshape(n, c, h, w).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(images, labels, int(labels.max()) + 1)


def _load_raw_dir(root: Path) -> Dataset:
    from PIL import Image

    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    images, labels = [], []
    shape = None
    for label, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except (OSError, ValueError) as exc:
                raise IngestionError(f"{f}: unreadable image ({exc})") from exc
            chw = arr.transpose(2, 0, 1)
            if shape is None:
                shape = chw.shape
            elif chw.shape != shape:
                raise IngestionError(f"{f}: shape {chw.shape} differs from {shape}")
            images.append(chw)
            labels.append(label)
    if not images:
        raise IngestionError(f"{root}: no images found")
    stack = np.stack(images).astype(np.float64) / 255.0
    return Dataset(stack, np.asarray(labels, dtype=np.int64), len(classes))


def load_dataset(path: str | Path, format: str) -> Dataset:
    """Load ``raw-dir`` (class subdirectories of 8-bit images) or ``packed-binary``."""
    p = Path(path)
    if not p.exists():
        raise IngestionError(f"{p}: does not exist")
    if format == "packed-binary":
        return _load_packed(p)
    if format == "raw-dir":
        return _load_raw_dir(p)
    raise IngestionError(f"unknown dataset format {format!r}")


def synthetic_dataset(
    num_classes: int = 10,
    per_class: int = 200,
    image_shape: tuple[int, int, int] = (3, 32, 32),
    seed: int = 0,
) -> Dataset:
    """Procedural colored textures, one texture family per class.

    Each class has its own base color, stripe orientation and frequency; each
    sample perturbs phase, contrast and adds mild pixel noise.  Values are
    quantized to 8 bits so the corpus round-trips through the packed format.
    """
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    cls_rng = np.random.default_rng([seed, 7919])
    base = cls_rng.uniform(0.2, 0.8, (num_classes, c))
    tint = cls_rng.uniform(-0.25, 0.25, (num_classes, c))
    angle = cls_rng.uniform(0, np.pi, num_classes)
    freq = cls_rng.uniform(1.0, 4.0, num_classes)
    images = np.empty((num_classes * per_class, c, h, w))
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, k in enumerate(labels):
        phase = rng.uniform(0, 2 * np.pi)
        contrast = rng.uniform(0.6, 1.0)
        u = np.cos(angle[k]) * xx + np.sin(angle[k]) * yy
        wave = np.sin(2 * np.pi * freq[k] * u + phase)
        img = base[k][:, None, None] + contrast * tint[k][:, None, None] * wave
        img += rng.normal(0, 0.02, (c, h, w))
        images[i] = img
    images = np.round(np.clip(images, 0, 1) * 255) / 255
    return Dataset(images, labels.astype(np.int64), num_classes)


def holdout_split(dataset: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split into (train, eval); the eval part is never partitioned."""
    rng = np.random.default_rng([seed, 104729])
    train_idx, eval_idx = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(eval_fraction * len(idx)))
        eval_idx.extend(idx[:k].tolist())
        train_idx.extend(idx[k:].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(eval_idx))


# --------------------------------------------------------------------------
# partitioning


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = total * proportions
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # Ties go to the lower client index (stable sort on negated remainders).
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    labels: Sequence[int],
    num_clients: int,
    alpha: float,
    rng: np.random.Generator,
) -> dict[int, list[int]]:
    """Split sample indices across clients with per-class Dirichlet(alpha) shares."""
    labels = np.asarray(labels, dtype=np.int64)
    if num_clients < 2:
        raise ConfigError(f"need at least 2 clients, got {num_clients}")
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if num_clients > len(labels):
        raise ConfigError(f"{num_clients} clients but only {len(labels)} samples")
    parts: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        p = rng.dirichlet(np.full(num_clients, alpha))
        counts = _largest_remainder(len(idx), p)
        start = 0
        for k, n in enumerate(counts):
            parts[k].extend(idx[start : start + n].tolist())
            start += n
    for k in range(num_clients):
        if not parts[k]:
            donor = max(range(num_clients), key=lambda j: (len(parts[j]), -j))
            parts[k].append(parts[donor].pop())
    return {k: sorted(v) for k, v in enumerate(parts)}


def class_histogram(partition: dict[int, list[int]], labels: Sequence[int], class_count: int) -> np.ndarray:
    """(clients x classes) sample counts."""
    labels = np.asarray(labels)
    hist = np.zeros((len(partition), class_count), dtype=np.int64)
    for k, idx in partition.items():
        hist[k] = np.bincount(labels[idx], minlength=class_count)
    return hist


def heterogeneity(partition: dict[int, list[int]], labels: Sequence[int], class_count: int) -> float:
    """Mean total-variation distance between client and global label distributions."""
    hist = class_histogram(partition, labels, class_count).astype(np.float64)
    glob = hist.sum(axis=0) / hist.sum()
    local = hist / hist.sum(axis=1, keepdims=True)
    return float(np.mean(0.5 * np.abs(local - glob).sum(axis=1)))


# --------------------------------------------------------------------------
# batching


def batch_iter(
    dataset: Dataset,
    indices: Sequence[int],
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[np.ndarray]:
    """One epoch of shuffled mini-batches of sample indices.

    The last short batch is kept.  Callers index ``dataset.images`` with the
    yielded arrays.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    idx = np.asarray(indices, dtype=np.int64)
    order = idx[rng.permutation(len(idx))]
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]
