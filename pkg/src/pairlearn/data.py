"""Deterministic dataset ingestion and light augmentation.

Three sources: a synthetic Gaussian-prototype generator for fast tests,
the CIFAR-10 binary layout, and the MNIST IDX layout. Loading normalizes
pixels with per-channel mean/std taken from the dataset spec (the shipped
config files carry the usual constants; the fallback is mean 0.5, std 0.5,
putting byte images roughly in [-1, 1]). Augmentation is pad-and-crop
plus horizontal flip, applied only to training batches; every random
choice derives from named seed streams so runs are bitwise reproducible.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .nn import ConfigError
from .plm import one_hot


class FormatError(ValueError):
    """A dataset file does not match its declared binary layout."""


@dataclass(frozen=True)
class DatasetSpec:
    source: str  # "synthetic" | "cifar10-binary" | "mnist-idx"
    classes: int
    seed: int
    root: str | None = None
    flip: bool = False
    crop_pad: int = 0
    image_size: int = 32
    channels: int = 3
    train_count: int = 1000
    eval_count: int = 1000
    noise: float = 0.25
    limit: int | None = None
    eval_limit: int | None = None
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10-binary", "mnist-idx"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "cifar10-binary" and self.classes != 10:
            raise ConfigError(f"cifar10 has 10 classes, spec says {self.classes}")
        if self.source == "mnist-idx" and self.classes != 10:
            raise ConfigError(f"mnist has 10 classes, spec says {self.classes}")
        if self.source != "synthetic" and self.root is None:
            raise ConfigError(f"source {self.source!r} needs a root path")
        if self.crop_pad < 0:
            raise ConfigError(f"crop_pad must be non-negative, got {self.crop_pad}")

    def normalization(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.channels
        mean = self.mean if self.mean is not None else (0.5,) * c
        std = self.std if self.std is not None else (0.5,) * c
        if len(mean) != c or len(std) != c:
            raise ConfigError(f"normalization needs {c} per-channel values")
        shape = (1, c, 1, 1)
        return (
            np.asarray(mean, dtype=np.float32).reshape(shape),
            np.asarray(std, dtype=np.float32).reshape(shape),
        )


@dataclass
class Batch:
    """One training or eval step's input: normalized images, one-hot labels."""

    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N, classes) float32 one-hot
    label_ids: np.ndarray  # (N,) int64


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray  # (N,) int64
    classes: int

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# synthetic source


def synth_generate(spec: DatasetSpec, split: str) -> Dataset:
    """Balanced classes as Gaussian prototypes in pixel space plus noise.

    Prototypes depend on (seed, 0); train noise on (seed, 1); eval noise
    on (seed, 2). With noise 0 every example equals its class prototype.
    """
    count = spec.train_count if split == "train" else spec.eval_count
    if count % spec.classes != 0:
        raise ConfigError(
            f"synthetic count {count} does not divide evenly over {spec.classes} classes"
        )
    shape = (spec.classes, spec.channels, spec.image_size, spec.image_size)
    proto_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    prototypes = proto_rng.standard_normal(shape).astype(np.float32)
    stream = 1 if split == "train" else 2
    noise_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream]))
    labels = np.repeat(np.arange(spec.classes, dtype=np.int64), count // spec.classes)
    images = prototypes[labels]
    if spec.noise > 0:
        images = images + spec.noise * noise_rng.standard_normal(images.shape).astype(np.float32)
    mean, std = spec.normalization()
    images = ((images - mean) / std).astype(np.float32)
    return Dataset(images=images, labels=labels, classes=spec.classes)


# ---------------------------------------------------------------------------
# cifar-10 binary source

_CIFAR_RECORD = 3073
_CIFAR_RECORDS_PER_FILE = 10000
_CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST_FILES = ["test_batch.bin"]


def read_cifar10_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    """One binary batch file -> (images uint8 (N,3,32,32), labels int64)."""
    size = os.path.getsize(path)
    expected = _CIFAR_RECORD * _CIFAR_RECORDS_PER_FILE
    if size != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes ({_CIFAR_RECORDS_PER_FILE} records of "
            f"{_CIFAR_RECORD}), got {size}"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} outside [0, 9]")
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def read_cifar10(root: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    names = _CIFAR_TRAIN_FILES if split == "train" else _CIFAR_TEST_FILES
    parts = []
    for name in names:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            raise FormatError(f"missing cifar10 batch file {path}")
        parts.append(read_cifar10_file(path))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return images, labels


# ---------------------------------------------------------------------------
# mnist idx source

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def read_mnist_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: expected magic {_IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
            )
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != n * rows * cols:
        raise FormatError(
            f"{images_path}: expected {n * rows * cols} pixel bytes, got {data.size}"
        )
    images = data.reshape(n, 1, rows, cols)
    with open(labels_path, "rb") as f:
        magic, n2 = struct.unpack(">II", f.read(8))
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: expected magic {_IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"
            )
        labels = np.frombuffer(f.read(), dtype=np.uint8).astype(np.int64)
    if labels.size != n2 or n2 != n:
        raise FormatError(
            f"{labels_path}: {labels.size} labels for {n} images (header says {n2})"
        )
    if labels.size and labels.max() > 9:
        raise FormatError(f"{labels_path}: label {labels.max()} outside [0, 9]")
    return images, labels


# ---------------------------------------------------------------------------
# loading


def _balanced_subset(images: np.ndarray, labels: np.ndarray, limit: int,
                     classes: int) -> tuple[np.ndarray, np.ndarray]:
    """First limit/classes examples of each class, in original order."""
    if limit % classes != 0:
        raise ConfigError(f"subset size {limit} does not divide evenly over {classes} classes")
    per = limit // classes
    keep = np.concatenate([np.flatnonzero(labels == k)[:per] for k in range(classes)])
    keep.sort()
    if keep.size != limit:
        raise ConfigError(f"dataset too small for a balanced subset of {limit}")
    return images[keep], labels[keep]


def load_dataset(spec: DatasetSpec, split: str) -> Dataset:
    """Materialize one split as normalized float32 images plus labels."""
    if split not in ("train", "eval"):
        raise ConfigError(f"split must be train or eval, got {split!r}")
    if spec.source == "synthetic":
        ds = synth_generate(spec, split)
    else:
        if spec.source == "cifar10-binary":
            raw, labels = read_cifar10(spec.root, "train" if split == "train" else "test")
        else:
            prefix = "train" if split == "train" else "t10k"
            raw, labels = read_mnist_idx(
                os.path.join(spec.root, f"{prefix}-images-idx3-ubyte"),
                os.path.join(spec.root, f"{prefix}-labels-idx1-ubyte"),
            )
        mean, std = spec.normalization()
        images = ((raw.astype(np.float32) / 255.0) - mean) / std
        ds = Dataset(images=images.astype(np.float32), labels=labels, classes=spec.classes)
    limit = spec.limit if split == "train" else spec.eval_limit
    if limit is not None and limit < len(ds):
        images, labels = _balanced_subset(ds.images, ds.labels, limit, spec.classes)
        ds = Dataset(images=images, labels=labels, classes=spec.classes)
    return ds


# ---------------------------------------------------------------------------
# augmentation


def flip_images(images: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mirror the selected images horizontally; an involution per image."""
    out = images.copy()
    out[mask] = out[mask][:, :, :, ::-1]
    return out


def crop_images(images: np.ndarray, pad: int, offsets: np.ndarray) -> np.ndarray:
    """Zero-pad by ``pad`` and re-crop each image at its (dy, dx) offset."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def augment(images: np.ndarray, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Label-preserving train-time transforms; identity when flags are off."""
    out = images
    if spec.crop_pad > 0:
        offsets = rng.integers(0, 2 * spec.crop_pad + 1, size=(images.shape[0], 2))
        out = crop_images(out, spec.crop_pad, offsets)
    if spec.flip:
        mask = rng.random(images.shape[0]) < 0.5
        out = flip_images(out, mask)
    return out


# ---------------------------------------------------------------------------
# epoch iteration


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def epoch_batches(ds: Dataset, spec: DatasetSpec, batch_size: int, epoch: int,
                  train: bool):
    """Yield Batches covering the split once; train batches are shuffled
    and augmented, eval batches are neither."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    n = len(ds)
    if train:
        order = epoch_permutation(spec.seed, epoch, n)
        aug_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, epoch, 7]))
    else:
        order = np.arange(n)
        aug_rng = None
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        images = ds.images[idx]
        if train:
            images = augment(images, spec, aug_rng)
        labels = ds.labels[idx]
        yield Batch(images=images, labels=one_hot(labels, ds.classes), label_ids=labels)
