"""Datasets: CIFAR binary ingestion, splitting, augmentation and synthetic fixtures.

Images are float32 NHWC arrays. Each split carries its name so code paths used
during evolution can refuse the test split.
"""

from __future__ import annotations

import hashlib
import os
import tarfile
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_PIXELS = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS
CIFAR_TRAIN_RECORDS = 50000
CIFAR_TEST_RECORDS = 10000
SPLIT_SEED = 20170303
DEFAULT_VAL_SIZE = 5000
DESK_TRAIN_SUBSET = 5000
DESK_VAL_SIZE = 1000

TRAIN, VALIDATION, TEST = "train", "validation", "test"

_CIFAR_LAYOUT = {
    # variant: (subdir, training files, test files, label bytes, classes)
    "cifar10": ("cifar-10-batches-bin", [f"data_batch_{i}.bin" for i in range(1, 6)],
                ["test_batch.bin"], 1, 10),
    "cifar100": ("cifar-100-binary", ["train.bin"], ["test.bin"], 2, 100),
}

CIFAR_VARIANTS = tuple(_CIFAR_LAYOUT)

CIFAR_ARCHIVES = {
    "cifar10": ("https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
                "c32a1d4ab5d03f1284b67883e8d87530"),
    "cifar100": ("https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
                 "03b5dce01913d631647c71ecec9e9cb8"),
}


class DatasetError(Exception):
    pass


class DatasetNotFoundError(DatasetError, FileNotFoundError):
    pass


class RecordCountMismatch(DatasetError):
    pass


class ChecksumMismatch(DatasetError):
    pass


@dataclass(frozen=True)
class Split:
    name: str
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.name not in (TRAIN, VALIDATION, TEST):
            raise ValueError(f"unknown split name {self.name!r}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree in length")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    split_sizes: tuple[int, int, int]
    source: str


@dataclass(frozen=True)
class Dataset:
    spec: DatasetSpec
    train: Split
    validation: Split
    test: Split | None

    def for_evolution(self) -> "Dataset":
        """The same data with the test split removed."""
        return replace(self, test=None)


# -- CIFAR -----------------------------------------------------------------------

def _cifar_dir(path: Path, subdir: str) -> Path:
    return path / subdir if (path / subdir).is_dir() else path


def _read_records(path: Path, label_bytes: int) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DatasetNotFoundError(f"missing CIFAR file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    record = label_bytes + CIFAR_PIXELS
    if raw.size == 0 or raw.size % record:
        raise RecordCountMismatch(
            f"{path}: {raw.size} bytes is not a whole number of {record}-byte records")
    raw = raw.reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)  # fine label for cifar100
    pixels = raw[:, label_bytes:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE)
    return pixels.transpose(0, 2, 3, 1), labels


def load_cifar(path: str | os.PathLike, variant: str = "cifar10", train_subset: int | None = None,
               val_size: int = DEFAULT_VAL_SIZE, seed: int = SPLIT_SEED) -> Dataset:
    """Load the binary CIFAR distribution and split it.

    ``val_size`` examples are held out of the 50,000 training records; the rest (or
    ``train_subset`` of them) form the training split. The permutation is fixed by
    ``seed``. Pixels go to [0, 1] then are standardized per channel with training
    split statistics.
    """
    if variant not in _CIFAR_LAYOUT:
        raise DatasetError(f"unknown CIFAR variant {variant!r}")
    subdir, train_files, test_files, label_bytes, classes = _CIFAR_LAYOUT[variant]
    root = _cifar_dir(Path(path), subdir)
    if not root.is_dir():
        raise DatasetNotFoundError(f"CIFAR directory not found: {root}")
    tr = [_read_records(root / f, label_bytes) for f in train_files]
    te = [_read_records(root / f, label_bytes) for f in test_files]
    x_all = np.concatenate([p for p, _ in tr])
    y_all = np.concatenate([lab for _, lab in tr])
    x_test = np.concatenate([p for p, _ in te])
    y_test = np.concatenate([lab for _, lab in te])
    if len(x_all) != CIFAR_TRAIN_RECORDS or len(x_test) != CIFAR_TEST_RECORDS:
        raise RecordCountMismatch(
            f"expected {CIFAR_TRAIN_RECORDS}/{CIFAR_TEST_RECORDS} records, "
            f"found {len(x_all)}/{len(x_test)}")
    if not 0 < val_size < len(x_all):
        raise DatasetError(f"val_size must be in (0, {len(x_all)})")
    perm = np.random.default_rng(seed).permutation(len(x_all))
    val_idx = perm[:val_size]
    train_idx = perm[val_size:]
    if train_subset is not None:
        if not 0 < train_subset <= len(train_idx):
            raise DatasetError(f"train_subset must be in (0, {len(train_idx)}]")
        train_idx = train_idx[:train_subset]
    return _standardized(variant, str(root), classes,
                         (x_all[train_idx], y_all[train_idx]),
                         (x_all[val_idx], y_all[val_idx]),
                         (x_test, y_test))


def _standardized(name, source, classes, train, val, test) -> Dataset:
    x_train = train[0].astype(np.float32) / 255.0
    mean = x_train.mean(axis=(0, 1, 2), dtype=np.float64).astype(np.float32)
    std = x_train.std(axis=(0, 1, 2), dtype=np.float64).astype(np.float32)
    std = np.where(std > 0, std, 1.0).astype(np.float32)

    def norm(x):
        return ((x.astype(np.float32) / 255.0 - mean) / std).astype(np.float32)

    spec = DatasetSpec(name, tuple(train[0].shape[1:]), classes,
                       (len(train[1]), len(val[1]), len(test[1])), source)
    return Dataset(spec, Split(TRAIN, norm(train[0]), train[1]),
                   Split(VALIDATION, norm(val[0]), val[1]),
                   Split(TEST, norm(test[0]), test[1]))


def fetch_cifar(dest: str | os.PathLike, variant: str = "cifar10") -> Path:
    """Download and unpack a CIFAR archive, verifying its MD5 first."""
    url, md5 = CIFAR_ARCHIVES[variant]
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    archive = dest / url.rsplit("/", 1)[1]
    if not archive.exists():
        urllib.request.urlretrieve(url, archive)
    digest = hashlib.md5(archive.read_bytes()).hexdigest()
    if digest != md5:
        raise ChecksumMismatch(f"{archive}: md5 {digest}, expected {md5}")
    with tarfile.open(archive) as tar:
        tar.extractall(dest, filter="data")
    return dest / _CIFAR_LAYOUT[variant][0]


# -- augmentation ----------------------------------------------------------------

def sample_augmentation(n: int, rng: np.random.Generator, pad: int = 4
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Crop offsets (n, 2) in {0..2*pad} and horizontal-flip flags (n,)."""
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    return offsets, flips


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad ``pad`` pixels per side, take a random crop of the original size,
    and flip horizontally with probability 0.5. Applied to training batches only."""
    n, h, w, _ = images.shape
    offsets, flips = sample_augmentation(n, rng, pad)
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, dy:dy + h, dx:dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def batches(split: Split, batch_size: int):
    """Sequential batches covering every example exactly once."""
    for i in range(0, len(split), batch_size):
        yield split.images[i:i + batch_size], split.labels[i:i + batch_size]


# -- synthetic fixtures ----------------------------------------------------------

SYNTHETIC_KINDS = ("separable2", "xor_grid", "k_class_blobs")
XOR_GRID_COORDS = (-1.5, -0.5, 0.5, 1.5)
SEPARABLE_NORMAL = np.array([1.0, -0.5])
SEPARABLE_MARGIN = 0.25


def synthetic_dataset(kind: str, size: int, rng: np.random.Generator | int,
                      num_classes: int | None = None, image_size: int = 8,
                      fractions: tuple[float, float] = (0.7, 0.15)) -> Dataset:
    """Small deterministic datasets for tests.

    * ``separable2``: 2-d points (1x1x2 images) split by a fixed line with a margin.
    * ``xor_grid``: points on a 4x4 grid labelled by the sign of ``x * y``.
    * ``k_class_blobs``: ``image_size`` square RGB images, each class a fixed 3x3
      pattern stamped at a random position over noise.

    ``size`` examples are shared out between train, validation and test by
    ``fractions`` (train, validation; the remainder is test).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if kind == "separable2" or kind == "xor_grid":
        k = 2
    elif kind == "k_class_blobs":
        k = num_classes if num_classes is not None else 4
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if num_classes is not None and num_classes != k:
        raise ValueError(f"{kind} has exactly {k} classes")
    if size < 10 * k:
        raise ValueError(f"size must be at least {10 * k}")

    if kind == "separable2":
        pts = []
        while len(pts) < size:
            p = rng.standard_normal(2)
            if abs(p @ SEPARABLE_NORMAL) >= SEPARABLE_MARGIN:
                pts.append(p)
        x = np.asarray(pts)
        y = (x @ SEPARABLE_NORMAL > 0).astype(np.int64)
        images = x.reshape(size, 1, 1, 2)
    elif kind == "xor_grid":
        grid = np.array([(a, b) for a in XOR_GRID_COORDS for b in XOR_GRID_COORDS])
        x = grid[np.arange(size) % len(grid)]
        x = x[rng.permutation(size)]
        y = ((x[:, 0] > 0) != (x[:, 1] > 0)).astype(np.int64)
        images = x.reshape(size, 1, 1, 2)
    else:
        patterns = rng.choice([-1.0, 1.0], size=(k, 3, 3, 3)) * 2.0
        y = np.arange(size) % k
        y = y[rng.permutation(size)].astype(np.int64)
        images = rng.standard_normal((size, image_size, image_size, 3)) * 0.5
        pos = rng.integers(0, image_size - 2, size=(size, 2))
        for i in range(size):
            r, c = pos[i]
            images[i, r:r + 3, c:c + 3] += patterns[y[i]]
    images = images.astype(np.float32)
    n_tr = int(round(size * fractions[0]))
    n_va = int(round(size * fractions[1]))
    spec = DatasetSpec(kind, tuple(images.shape[1:]), k,
                       (n_tr, n_va, size - n_tr - n_va), "synthetic")
    return Dataset(spec,
                   Split(TRAIN, images[:n_tr], y[:n_tr]),
                   Split(VALIDATION, images[n_tr:n_tr + n_va], y[n_tr:n_tr + n_va]),
                   Split(TEST, images[n_tr + n_va:], y[n_tr + n_va:]))
