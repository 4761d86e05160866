"""Synthetic 10-class glyph images written in the cifar10 binary layout.

Each class is a fixed 8x8 stencil (cross, ring, stripes, ...) stamped at
a random position in a 32x32 noise image with a random bright color on a
random dark background. Shape identity is the label; color and position
carry no class information, so a model must actually learn the patterns.
The writer emits the exact on-disk layout the cifar10-binary reader
expects (five 10,000-record train files plus one test file), which makes
the full ingestion path exercisable on machines without the real corpus.
"""

from __future__ import annotations

import os

import numpy as np

_SIZE = 32
_STAMP = 8
_RECORDS_PER_FILE = 10000


def class_stencils() -> np.ndarray:
    """(10, 8, 8) boolean masks, one distinctive shape per class."""
    yy, xx = np.mgrid[0:_STAMP, 0:_STAMP]
    r2 = (yy - 3.5) ** 2 + (xx - 3.5) ** 2
    stencils = np.stack([
        ((yy >= 3) & (yy <= 4)) | ((xx >= 3) & (xx <= 4)),        # cross
        (np.abs(yy - xx) <= 1) | (np.abs(yy + xx - 7) <= 1),      # x
        (yy % 7 == 0) | (xx % 7 == 0),                            # square outline
        r2 <= 6.25,                                               # disk
        yy % 2 == 0,                                              # horizontal stripes
        xx % 2 == 0,                                              # vertical stripes
        np.abs(yy - xx) <= 1,                                     # one diagonal
        (r2 >= 4.0) & (r2 <= 12.25),                              # ring
        (xx <= 1) | (yy >= 6),                                    # corner
        ((yy // 2) + (xx // 2)) % 2 == 0,                         # checkerboard
    ])
    return stencils


def render_images(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """(N, 3, 32, 32) uint8 images for the given label vector."""
    n = labels.shape[0]
    stencils = class_stencils()
    base = rng.integers(20, 110, size=(n, 3, 1, 1))
    noise = rng.normal(0.0, 22.0, size=(n, 3, _SIZE, _SIZE))
    images = np.clip(base + noise, 0, 255)
    colors = rng.integers(150, 256, size=(n, 3))
    offsets = rng.integers(0, _SIZE - _STAMP + 1, size=(n, 2))
    for i in range(n):
        mask = stencils[labels[i]]
        dy, dx = offsets[i]
        region = images[i, :, dy : dy + _STAMP, dx : dx + _STAMP]
        region[:, mask] = colors[i][:, None]
    return images.astype(np.uint8)


def _balanced_shuffled_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.repeat(np.arange(10, dtype=np.int64), n // 10)
    rng.shuffle(labels)
    return labels


def write_glyph_cifar(root: str, seed: int = 0) -> None:
    """Write data_batch_1..5.bin and test_batch.bin under ``root``.

    Every file gets an exactly class-balanced, shuffled label set drawn
    from its own (seed, file index) stream, so the corpus is fully
    deterministic and any balanced prefix subset stays balanced-ish.
    """
    os.makedirs(root, exist_ok=True)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for index, name in enumerate(names):
        path = os.path.join(root, name)
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        labels = _balanced_shuffled_labels(_RECORDS_PER_FILE, rng)
        images = render_images(labels, rng)
        records = np.empty((_RECORDS_PER_FILE, 1 + 3 * _SIZE * _SIZE), dtype=np.uint8)
        records[:, 0] = labels
        records[:, 1:] = images.reshape(_RECORDS_PER_FILE, -1)
        with open(path, "wb") as f:
            f.write(records.tobytes())


def ensure_glyph_cifar(root: str, seed: int = 0) -> str:
    """Create the corpus once; later calls are no-ops."""
    expected = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    if not all(os.path.exists(os.path.join(root, name)) for name in expected):
        write_glyph_cifar(root, seed)
    return root
