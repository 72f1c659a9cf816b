"""Dataset containers, CIFAR-10 / STL-10 binary readers and synthetic domains."""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng

CIFAR_HW = 32
CIFAR_RECORD = 1 + 3 * CIFAR_HW * CIFAR_HW  # 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_TRAIN_N = 50_000
CIFAR_TEST_N = 10_000

STL_HW = 96
STL_IMAGE_BYTES = 3 * STL_HW * STL_HW  # 27648
STL_TRAIN_N = 5_000
STL_TEST_N = 8_000


class DatasetFormatError(ValueError):
    """A dataset file does not match its binary layout."""


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [n, c, h, w], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# CIFAR-10 -----------------------------------------------------------------

def read_cifar_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a file of 3073-byte records: label byte, then R, G, B planes."""
    raw = np.fromfile(path, dtype=np.uint8)
    n, rem = divmod(raw.size, CIFAR_RECORD)
    if rem:
        raise DatasetFormatError(
            f"{path}: truncated record at byte offset {n * CIFAR_RECORD} "
            f"({rem} of {CIFAR_RECORD} bytes present)")
    rec = raw.reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        i = int(bad[0])
        raise DatasetFormatError(f"{path}: label {labels[i]} >= 10 in record {i} (byte offset {i * CIFAR_RECORD})")
    images = rec[:, 1:].reshape(n, 3, CIFAR_HW, CIFAR_HW)
    return images, labels


def write_cifar_records(path, dataset: Dataset):
    """Write ``dataset`` as 3073-byte records (pixels quantized to bytes)."""
    n, c, h, w = dataset.images.shape
    if (c, h, w) != (3, CIFAR_HW, CIFAR_HW):
        raise ValueError(f"record format needs 3x32x32 images, got {(c, h, w)}")
    if dataset.num_classes > 256:
        raise ValueError("labels must fit in one byte")
    pix = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(n, -1)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = pix
    out.tofile(path)


def read_cifar_dataset(path, num_classes: int = 10) -> Dataset:
    images, labels = read_cifar_records(path)
    return Dataset(images / 255.0, labels, num_classes)


def _cifar_dir(root) -> Path:
    root = Path(root)
    sub = root / "cifar-10-batches-bin"
    return sub if sub.is_dir() else root


def load_cifar10(root, strict: bool = True) -> tuple[Dataset, Dataset]:
    """Load the binary CIFAR-10 distribution from ``root``.

    With ``strict`` the record counts must match the official 50,000/10,000.
    """
    d = _cifar_dir(root)
    parts = []
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        f = d / name
        if not f.is_file():
            raise FileNotFoundError(f"missing CIFAR-10 file {f}")
        parts.append(read_cifar_records(f))
    train_x = np.concatenate([p[0] for p in parts[:-1]])
    train_y = np.concatenate([p[1] for p in parts[:-1]])
    test_x, test_y = parts[-1]
    if strict and (len(train_y), len(test_y)) != (CIFAR_TRAIN_N, CIFAR_TEST_N):
        raise DatasetFormatError(
            f"expected {CIFAR_TRAIN_N}/{CIFAR_TEST_N} records, found {len(train_y)}/{len(test_y)}")
    return (Dataset(train_x / 255.0, train_y, 10), Dataset(test_x / 255.0, test_y, 10))


# STL-10 -------------------------------------------------------------------

def read_stl10_split(images_path, labels_path) -> Dataset:
    """Images are stored channel-planar and column-major within each plane."""
    raw = np.fromfile(images_path, dtype=np.uint8)
    n, rem = divmod(raw.size, STL_IMAGE_BYTES)
    if rem:
        raise DatasetFormatError(
            f"{images_path}: size {raw.size} is not a multiple of {STL_IMAGE_BYTES} bytes")
    labels = np.fromfile(labels_path, dtype=np.uint8).astype(np.int64)
    if labels.size != n:
        raise DatasetFormatError(f"{n} images in {images_path} but {labels.size} labels in {labels_path}")
    if n and (labels.min() < 1 or labels.max() > 10):
        raise DatasetFormatError(f"{labels_path}: labels must lie in 1..10")
    images = raw.reshape(n, 3, STL_HW, STL_HW).transpose(0, 1, 3, 2)
    return Dataset(images / 255.0, labels - 1, 10)


def load_stl10(root, strict: bool = True) -> tuple[Dataset, Dataset]:
    root = Path(root)
    d = root / "stl10_binary" if (root / "stl10_binary").is_dir() else root
    for name in ("train_X.bin", "train_y.bin", "test_X.bin", "test_y.bin"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing STL-10 file {d / name}")
    train = read_stl10_split(d / "train_X.bin", d / "train_y.bin")
    test = read_stl10_split(d / "test_X.bin", d / "test_y.bin")
    if strict and (len(train), len(test)) != (STL_TRAIN_N, STL_TEST_N):
        raise DatasetFormatError(
            f"expected {STL_TRAIN_N}/{STL_TEST_N} labeled images, found {len(train)}/{len(test)}")
    return train, test


# Transforms ---------------------------------------------------------------

def _permutation(n: int, seed: int, *ids: int) -> np.ndarray:
    key = rng.derive_seed(seed, *ids)
    return np.argsort(rng.uniform_stream(key, n), kind="stable")


def subsample_stratified(d: Dataset, fraction: float, seed: int,
                         stratified: bool = True) -> Dataset:
    """Keep ``floor(fraction * count)`` samples of every class.

    With ``stratified=False`` the fraction is drawn from the pooled set
    instead. The result is in a seeded shuffled order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not stratified:
        k = int(fraction * len(d))
        if k == 0:
            raise ValueError(f"fraction {fraction} selects no samples")
        return d.take(_permutation(len(d), seed, 0)[:k])
    chosen = []
    for c, count in enumerate(d.class_counts):
        if count == 0:
            continue
        k = int(fraction * count)
        if k == 0:
            raise ValueError(f"fraction {fraction} selects no samples of class {c} ({count} available)")
        members = np.flatnonzero(d.labels == c)
        chosen.append(members[_permutation(count, seed, 1, c)[:k]])
    idx = np.concatenate(chosen)
    return d.take(idx[_permutation(len(idx), seed, 2)])


def resize_box(d: Dataset, factor: int) -> Dataset:
    """Downscale by averaging non-overlapping ``factor x factor`` blocks."""
    n, c, h, w = d.images.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"{h}x{w} images are not divisible by factor {factor}")
    if factor == 1:
        return Dataset(d.images.copy(), d.labels.copy(), d.num_classes)
    small = d.images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return Dataset(small, d.labels.copy(), d.num_classes)


# Synthetic two-domain benchmark -------------------------------------------

PATCH = 9
NUM_PRIMITIVES = 8
SOURCE_DOMAIN, TARGET_DOMAIN = 0, 1


def _segment(p, a, b, width):
    yy, xx = np.mgrid[0:PATCH, 0:PATCH].astype(np.float64)
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = b - a
    t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / (d @ d), 0.0, 1.0)
    dist = np.hypot(xx - (a[0] + t * d[0]), yy - (a[1] + t * d[1]))
    return np.maximum(p, np.clip(width - dist, 0.0, 1.0))


def primitive(kind: int, width: float = 1.5) -> np.ndarray:
    """Anti-aliased 9x9 intensity patch for one alphabet symbol.

    0 horizontal bar, 1 vertical bar, 2 and 3 diagonals, 4 and 5 opposite
    corners, 6 blob, 7 ring.
    """
    p = np.zeros((PATCH, PATCH))
    yy, xx = np.mgrid[0:PATCH, 0:PATCH].astype(np.float64)
    r = np.hypot(xx - 4, yy - 4)
    if kind == 0:
        return _segment(p, (1, 4), (7, 4), width)
    if kind == 1:
        return _segment(p, (4, 1), (4, 7), width)
    if kind == 2:
        return _segment(p, (1, 1), (7, 7), width)
    if kind == 3:
        return _segment(p, (1, 7), (7, 1), width)
    if kind == 4:
        return _segment(_segment(p, (1, 1), (7, 1), width), (1, 1), (1, 7), width)
    if kind == 5:
        return _segment(_segment(p, (7, 7), (1, 7), width), (7, 7), (7, 1), width)
    if kind == 6:
        return np.exp(-r * r / (2 * (width + 0.3) ** 2))
    if kind == 7:
        return np.clip(width - np.abs(r - 3.0), 0.0, 1.0)
    raise ValueError(f"unknown primitive {kind}")


def domain_class_pairs(num_classes: int, seed: int) -> tuple[list, list]:
    """Disjoint primitive-pair vocabularies for the source and target domains.

    Every primitive appears in at least one source pair so features learned
    on the source cover the whole alphabet.
    """
    pairs = list(itertools.combinations(range(NUM_PRIMITIVES), 2))
    if 2 * num_classes > len(pairs):
        raise ValueError(f"at most {len(pairs) // 2} classes per domain")
    for attempt in itertools.count():
        order = _permutation(len(pairs), seed, 7, attempt)
        src = [pairs[i] for i in order[:num_classes]]
        tgt = [pairs[i] for i in order[num_classes:2 * num_classes]]
        if num_classes * 2 < NUM_PRIMITIVES or len({p for pr in src for p in pr}) == NUM_PRIMITIVES:
            return src, tgt


def _render(gen: np.random.Generator, pair, image_hw: int, noise: float) -> np.ndarray:
    cell = image_hw // 3
    img = np.empty((3, image_hw, image_hw))
    img[:] = gen.uniform(0.0, 0.3, size=(3, 1, 1))
    cells = gen.choice(9, size=2, replace=False)
    for kind, c in zip(pair, cells):
        patch = primitive(int(kind), width=gen.uniform(1.2, 1.8))
        y0 = int(np.clip((c // 3) * cell + (cell - PATCH) // 2 + gen.integers(-1, 2), 0, image_hw - PATCH))
        x0 = int(np.clip((c % 3) * cell + (cell - PATCH) // 2 + gen.integers(-1, 2), 0, image_hw - PATCH))
        color = gen.uniform(0.5, 1.0, size=(3, 1, 1))
        region = img[:, y0:y0 + PATCH, x0:x0 + PATCH]
        region += (color - region) * patch
    img += gen.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _make_split(pairs, n_per_class: int, image_hw: int, noise: float, seed: int,
                domain: int, split: int) -> Dataset:
    gen = np.random.default_rng(rng.derive_seed(seed, 11, domain, split))
    num_classes = len(pairs)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    labels = labels[_permutation(len(labels), seed, 12, domain, split)]
    images = np.stack([_render(gen, pairs[y], image_hw, noise) for y in labels])
    return Dataset(images, labels, num_classes)


def generate_synthetic_domains(n_per_class: int, num_classes: int = 10, image_hw: int = 32,
                               seed: int = 0, n_test_per_class: int | None = None,
                               noise: float = 0.1):
    """Two labelled domains drawn from one shared shape alphabet.

    Each class is an unordered pair of primitives placed in two random cells
    of a 3x3 grid, with random colors, stroke width, jitter and pixel noise.
    Source and target use disjoint pair vocabularies, so low-level detectors
    carry over while the class semantics do not.

    Returns ``(source_train, source_test, target_train, target_test)``.
    """
    if n_per_class < 1 or num_classes < 1:
        raise ValueError("n_per_class and num_classes must be positive")
    if image_hw < 3 * PATCH:
        raise ValueError(f"image_hw must be at least {3 * PATCH}")
    n_test = n_test_per_class if n_test_per_class is not None else max(1, n_per_class // 2)
    src, tgt = domain_class_pairs(num_classes, seed)
    out = []
    for domain, pairs in ((SOURCE_DOMAIN, src), (TARGET_DOMAIN, tgt)):
        out.append(_make_split(pairs, n_per_class, image_hw, noise, seed, domain, 0))
        out.append(_make_split(pairs, n_test, image_hw, noise, seed, domain, 1))
    return tuple(out)


SYNTHETIC_FILES = ("source_train.bin", "source_test.bin", "target_train.bin", "target_test.bin")


def export_synthetic(datasets, directory) -> list:
    """Write the four synthetic splits as CIFAR-style record files."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, d in zip(SYNTHETIC_FILES, datasets):
        p = Path(directory) / name
        write_cifar_records(p, d)
        paths.append(p)
    return paths


def load_synthetic(directory, num_classes: int = 10):
    return tuple(read_cifar_dataset(Path(directory) / name, num_classes) for name in SYNTHETIC_FILES)
