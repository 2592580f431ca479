"""Dataset ingestion (IDX byte format), few-shot episode sampling, batch
iteration, and a seeded synthetic glyph generator.

The glyph generator renders per-class random binary patterns under small
random affine transforms, so any number of procedurally distinct classes
is available without downloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "IdxFormatError",
    "LabeledDataset",
    "Episode",
    "ClassSplit",
    "load_idx",
    "write_idx",
    "sample_episode",
    "batch_iter",
    "make_synthetic_glyphs",
    "synthetic_dataset",
    "synthetic_train_test",
    "split_classes",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX input: bad magic, truncated payload, or count mismatch."""


@dataclass
class LabeledDataset:
    """Images scaled to [0, 1] with integer class labels."""

    images: np.ndarray  # (count, C, H, W) float32
    labels: np.ndarray  # (count,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on sample count")
        self.class_index: dict[int, np.ndarray] = {}
        for cls in np.unique(self.labels):
            self.class_index[int(cls)] = np.flatnonzero(self.labels == cls)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_index)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices])


def _read_exact(f, n: int, what: str) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise IdxFormatError(f"truncated IDX file while reading {what}")
    return chunk


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an MNIST-compatible IDX image/label pair (big-endian headers)."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"bad magic 0x{magic:08x} in image file (want 0x{IMAGE_MAGIC:08x})")
        payload = _read_exact(f, count * rows * cols, "image payload")
        if f.read(1):
            raise IdxFormatError("trailing bytes after image payload")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"bad magic 0x{magic:08x} in label file (want 0x{LABEL_MAGIC:08x})")
        labels = np.frombuffer(_read_exact(f, label_count, "label payload"), dtype=np.uint8)
        if f.read(1):
            raise IdxFormatError("trailing bytes after label payload")

    if count != label_count:
        raise IdxFormatError(f"count mismatch: {count} images vs {label_count} labels")
    return LabeledDataset(
        (images.astype(np.float32) / 255.0), labels.astype(np.int64)
    )


def write_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images of shape (count, 1, H, W) and labels to IDX files."""
    if images_u8.dtype != np.uint8:
        raise ValueError("images must be uint8")
    count, _, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols))
        f.write(images_u8.reshape(count, rows, cols).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, count))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint class-id sets for meta-training and meta-testing."""

    meta_train_classes: tuple[int, ...]
    meta_test_classes: tuple[int, ...]

    def __post_init__(self):
        overlap = set(self.meta_train_classes) & set(self.meta_test_classes)
        if overlap:
            raise ValueError(f"class splits overlap: {sorted(overlap)}")


def split_classes(classes: Sequence[int], holdout: int, rng: np.random.Generator) -> ClassSplit:
    """Hold out ``holdout`` classes for meta-testing, the rest for training."""
    ordered = sorted(classes)
    if not 0 < holdout < len(ordered):
        raise ValueError(f"holdout {holdout} must be in (0, {len(ordered)})")
    picked = rng.choice(len(ordered), size=holdout, replace=False)
    test = tuple(sorted(ordered[i] for i in picked))
    train = tuple(c for c in ordered if c not in set(test))
    return ClassSplit(train, test)


@dataclass
class Episode:
    """One N-way K-shot task with disjoint support and query sets.

    Labels are remapped to [0, N) by position in ``class_ids``. The
    dataset row indices behind each half are kept for auditability.
    """

    class_ids: tuple[int, ...]
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    query_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def sample_episode(
    ds: LabeledDataset,
    classes: Sequence[int],
    ways: int,
    shots: int,
    query_shots: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw ``ways`` classes, then ``shots`` support and ``query_shots``
    query samples per class, without replacement inside a class."""
    pool = sorted(classes)
    if len(pool) < ways:
        raise ValueError(f"need {ways} classes, split has {len(pool)}")
    chosen = [pool[i] for i in rng.choice(len(pool), size=ways, replace=False)]

    support_idx: list[np.ndarray] = []
    query_idx: list[np.ndarray] = []
    for cls in chosen:
        candidates = ds.class_index.get(cls)
        if candidates is None or len(candidates) < shots + query_shots:
            have = 0 if candidates is None else len(candidates)
            raise ValueError(
                f"class {cls} has {have} samples, needs {shots + query_shots}"
            )
        picked = candidates[rng.choice(len(candidates), size=shots + query_shots, replace=False)]
        support_idx.append(picked[:shots])
        query_idx.append(picked[shots:])

    sup = np.concatenate(support_idx)
    qry = np.concatenate(query_idx)
    sup_y = np.repeat(np.arange(ways, dtype=np.int64), shots)
    qry_y = np.repeat(np.arange(ways, dtype=np.int64), query_shots)
    return Episode(tuple(chosen), ds.images[sup], sup_y, ds.images[qry], qry_y, sup, qry)


def batch_iter(
    ds: LabeledDataset,
    batch_size: int,
    shuffle: bool = True,
    rng: Optional[np.random.Generator] = None,
    drop_last: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; order is the seeded permutation."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise ValueError("shuffling requires an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield ds.images[idx], ds.labels[idx]


# -- synthetic glyphs ---------------------------------------------------------


_GRID = 8  # coarse pattern resolution
_MIN_ON = 12  # pattern must have enough ink to survive transforms


def _class_pattern(rng: np.random.Generator) -> np.ndarray:
    while True:
        pattern = (rng.random((_GRID, _GRID)) < 0.45).astype(np.float64)
        if _MIN_ON <= pattern.sum() <= _GRID * _GRID - _MIN_ON:
            return pattern


def _render(pattern: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize a coarse pattern under a small random affine transform."""
    angle = rng.uniform(-0.35, 0.35)  # radians, about +/- 20 degrees
    sx, sy = rng.uniform(0.85, 1.15, size=2)
    tx, ty = rng.uniform(-0.08, 0.08, size=2) * size

    # map output pixel centers into pattern coordinates (inverse transform)
    span = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    yy, xx = np.meshgrid(span, span, indexing="ij")
    cos, sin = np.cos(angle), np.sin(angle)
    u = (cos * (xx - tx) + sin * (yy - ty)) / sx
    v = (-sin * (xx - tx) + cos * (yy - ty)) / sy
    # pattern occupies the central 80% of the canvas
    scale = (_GRID - 1) / (0.8 * size)
    pu = u * scale + (_GRID - 1) / 2.0
    pv = v * scale + (_GRID - 1) / 2.0

    # bilinear sample with zero padding outside the pattern
    p0u, p0v = np.floor(pu).astype(int), np.floor(pv).astype(int)
    fu, fv = pu - p0u, pv - p0v
    img = np.zeros((size, size), dtype=np.float64)
    for du, dv, weight in (
        (0, 0, (1 - fu) * (1 - fv)),
        (1, 0, fu * (1 - fv)),
        (0, 1, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        iu, iv = p0u + du, p0v + dv
        inside = (iu >= 0) & (iu < _GRID) & (iv >= 0) & (iv < _GRID)
        img[inside] += weight[inside] * pattern[iv[inside], iu[inside]]
    return np.clip(img, 0.0, 1.0)


def make_synthetic_glyphs(
    num_classes: int,
    samples_per_class: int,
    image_size: int = 28,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generate uint8 images (count, 1, H, W) and labels for procedurally
    distinct glyph classes. Deterministic in the seed."""
    if num_classes < 1 or samples_per_class < 1:
        raise ValueError("need at least one class and one sample per class")
    streams = np.random.SeedSequence(seed).spawn(num_classes)
    images = np.empty(
        (num_classes * samples_per_class, 1, image_size, image_size), dtype=np.uint8
    )
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    patterns: list[np.ndarray] = []
    for cls in range(num_classes):
        rng = np.random.default_rng(streams[cls])
        pattern = _class_pattern(rng)
        # regenerate on a near-duplicate of an earlier class
        while any(np.abs(pattern - p).sum() < 8 for p in patterns):
            pattern = _class_pattern(rng)
        patterns.append(pattern)
        for s in range(samples_per_class):
            img = _render(pattern, image_size, rng)
            row = cls * samples_per_class + s
            images[row, 0] = np.floor(img * 255.0 + 0.5).astype(np.uint8)
            labels[row] = cls
    return images, labels


def synthetic_dataset(
    num_classes: int,
    samples_per_class: int,
    image_size: int = 28,
    seed: int = 0,
) -> LabeledDataset:
    images, labels = make_synthetic_glyphs(num_classes, samples_per_class, image_size, seed)
    return LabeledDataset(images.astype(np.float32) / 255.0, labels)


def synthetic_train_test(
    num_classes: int,
    train_per_class: int,
    test_per_class: int,
    image_size: int = 28,
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test datasets over the same glyph classes with disjoint samples
    (the first draws per class go to training)."""
    total = train_per_class + test_per_class
    images, labels = make_synthetic_glyphs(num_classes, total, image_size, seed)
    images = images.astype(np.float32) / 255.0
    train_rows: list[int] = []
    test_rows: list[int] = []
    for cls in range(num_classes):
        base = cls * total
        train_rows.extend(range(base, base + train_per_class))
        test_rows.extend(range(base + train_per_class, base + total))
    return (
        LabeledDataset(images[train_rows], labels[train_rows]),
        LabeledDataset(images[test_rows], labels[test_rows]),
    )
