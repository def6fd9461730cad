"""MNIST IDX loading, a synthetic Gaussian task, and minibatching."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (n, features), float64
    labels: np.ndarray          # (n,), int64
    n_classes: int
    split: str = "train"
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, self.split,
                       self.image_shape)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, name: str) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{name}: truncated at byte offset {len(raw)} (need 4-byte magic)")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise IdxFormatError(f"{name}: bad magic 0x{magic:08x} at byte offset 0, "
                             f"expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{name}: truncated at byte offset {len(raw)} inside the "
                             f"{ndim}-dimension header (needs {header} bytes)")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise IdxFormatError(f"{name}: truncated at byte offset {len(raw)}, "
                             f"dimensions {dims} need {need} bytes")
    if len(raw) > need:
        raise IdxFormatError(f"{name}: {len(raw) - need} trailing bytes after offset {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10, split: str = "train") -> Dataset:
    imgs = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, str(labels_path))
    if imgs.ndim < 2:
        raise IdxFormatError(f"{images_path}: image file has {imgs.ndim} dimensions")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: label file has {labels.ndim} dimensions")
    if imgs.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    n = imgs.shape[0]
    return Dataset(imgs.reshape(n, -1).astype(np.float64) / 255.0, labels.astype(np.int64),
                   n_classes, split, (1,) + tuple(imgs.shape[1:]))


def _find(data_dir: Path, stem: str) -> Path | None:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (data_dir / cand).exists():
            return data_dir / cand
    return None


def mnist_available(data_dir=None) -> bool:
    data_dir = data_dir or os.environ.get("DATA_DIR")
    if not data_dir:
        return False
    return all(_find(Path(data_dir), f) for pair in MNIST_FILES.values() for f in pair)


def load_mnist(data_dir=None, split: str = "train") -> Dataset:
    data_dir = data_dir or os.environ.get("DATA_DIR")
    if not data_dir:
        raise FileNotFoundError("no MNIST data directory: pass --data-dir or set DATA_DIR")
    data_dir = Path(data_dir)
    paths = [_find(data_dir, f) for f in MNIST_FILES[split]]
    if None in paths:
        missing = [f for f, p in zip(MNIST_FILES[split], paths) if p is None]
        raise FileNotFoundError(f"{data_dir}: missing {', '.join(missing)}")
    return load_idx(paths[0], paths[1], 10, split)


def synthetic_gaussian_task(n: int, features: int, classes: int, seed: int = 0,
                            separation: float = 3.0, noise: float = 0.1,
                            split: str = "train") -> Dataset:
    """Class-conditional Gaussians with values clipped to [0, 1].

    Class centers depend only on ``seed``; ``split`` picks an independent
    sample draw, so train and test sets share the same task. Labels are
    assigned round-robin so the class histogram is balanced to within one.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    centers = Rng(seed, (0x5EED,)).uniform(-1.0, 1.0, size=(classes, features))
    rng = Rng(seed, (0x5EED, sum(split.encode())))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers = 0.5 + centers * (separation * noise / 2)
    labels = np.arange(n, dtype=np.int64) % classes
    labels = labels[rng.permutation(n)]
    x = centers[labels] + rng.normal(0.0, noise, size=(n, features))
    return Dataset(np.clip(x, 0.0, 1.0), labels, classes, split)


def batches(ds: Dataset, batch_size: int, rng: Rng | None = None,
            shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (images, labels) minibatches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = rng.permutation(n) if shuffle and rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
