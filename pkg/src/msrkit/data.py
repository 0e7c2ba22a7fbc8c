"""CIFAR-10 binary ingestion, augmentation, batching, and synthetic data.

The on-disk record format is the stock CIFAR-10 binary layout: 3073 bytes
per record, byte 0 the label, bytes 1..3072 the 3x32x32 pixels stored
channel-planar (all red, all green, all blue), row-major within a plane.
Synthetic datasets serialize to the very same format (at 32x32), so the
parse/normalize/batch path downstream is identical whichever source a run
uses.

Augmentation is the standard small-image recipe: horizontal flip with
probability 1/2 plus zero-pad-4-then-random-crop translation.  A
scale-jitter variant (random resize, then pad/crop back) is available
behind a flag; neither is claimed canonical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DataError
from .tensor import Prng, Tensor

RECORD_BYTES = 3073
CIFAR_CLASSES = 10
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

# md5 of cifar-10-binary.tar.gz as published on the dataset's homepage
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR_TAR_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"


@dataclass
class ImageRecord:
    """One labeled image in the binary record layout."""

    label: int
    pixels: np.ndarray  # uint8 [3, 32, 32], channel-planar

    def to_bytes(self) -> bytes:
        return bytes([self.label]) + self.pixels.tobytes()


@dataclass
class Dataset:
    """In-memory image set: uint8 pixels [n, 3, H, W] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"dataset: images {self.images.shape} vs labels {self.labels.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])

    @classmethod
    def from_records(cls, records: list[ImageRecord]) -> "Dataset":
        images = np.stack([r.pixels for r in records]) if records else \
            np.zeros((0,) + CIFAR_SHAPE, dtype=np.uint8)
        labels = np.array([r.label for r in records], dtype=np.int64)
        return cls(images, labels)

    def to_records(self) -> list[ImageRecord]:
        return [ImageRecord(int(l), img) for l, img in zip(self.labels, self.images)]

    def to_cifar_bytes(self) -> bytes:
        if self.images.shape[1:] != CIFAR_SHAPE:
            raise DataError(
                f"record serialization needs {CIFAR_SHAPE} images, got "
                f"{self.images.shape[1:]}")
        n = len(self)
        buf = np.empty((n, RECORD_BYTES), dtype=np.uint8)
        buf[:, 0] = self.labels
        buf[:, 1:] = self.images.reshape(n, -1)
        return buf.tobytes()


def parse_cifar10(buf: bytes) -> list[ImageRecord]:
    """Decode concatenated 3073-byte records; strict about length and labels."""
    if len(buf) % RECORD_BYTES != 0:
        n_full = len(buf) // RECORD_BYTES
        raise DataError(
            f"cifar10 parse: byte length {len(buf)} is not a multiple of "
            f"{RECORD_BYTES} (holds {n_full} full records plus "
            f"{len(buf) - n_full * RECORD_BYTES} trailing bytes)")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0]
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise DataError(
            f"cifar10 parse: record {bad[0]} has label {labels[bad[0]]} >= "
            f"{CIFAR_CLASSES}")
    pixels = raw[:, 1:].reshape(-1, *CIFAR_SHAPE)
    return [ImageRecord(int(l), px) for l, px in zip(labels, pixels)]


def serialize_records(records: list[ImageRecord]) -> bytes:
    return b"".join(r.to_bytes() for r in records)


def load_cifar10_dir(path: str, train: bool = True) -> Dataset:
    """Read the extracted binary batch files from a directory."""
    names = CIFAR_TRAIN_FILES if train else [CIFAR_TEST_FILE]
    records: list[ImageRecord] = []
    for name in names:
        full = os.path.join(path, name)
        if not os.path.exists(full):
            raise DataError(f"cifar10: missing batch file {full}")
        with open(full, "rb") as f:
            records.extend(parse_cifar10(f.read()))
    return Dataset.from_records(records)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std of x/255, computed from the training split only."""

    mean: Tensor
    std: Tensor

    @classmethod
    def identity(cls) -> "ChannelStats":
        return cls(np.zeros(3), np.ones(3))


def compute_stats(images_u8: np.ndarray) -> ChannelStats:
    x = images_u8.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    if np.any(std == 0.0):
        raise DataError(f"normalize: zero std in channels {np.nonzero(std == 0)[0].tolist()}")
    return ChannelStats(mean, std)


def normalize_images(images_u8: np.ndarray, stats: ChannelStats) -> Tensor:
    """(x/255 - mean_c) / std_c as float64 [n, C, H, W]."""
    if np.any(stats.std == 0.0):
        raise DataError("normalize: zero std")
    x = images_u8.astype(np.float64) / 255.0
    return (x - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

AUGMENT_PAD = 4


def augment_image(img: np.ndarray, rng: Prng, mode: str = "translate") -> np.ndarray:
    """Train-time augmentation of one uint8 [C, H, W] image.

    translate: flip coin, then zero-pad 4 and crop H x W at a uniform
    offset.  scale: flip coin, then resize by a uniform factor in
    [0.85, 1.15] (nearest neighbor) and center-pad/crop back.  Output
    shape and label always match the input.  Draw order is fixed (flip
    first), so a stubbed rng can pin the transform.
    """
    c, h, w = img.shape
    flip = rng.uniform(0.0, 1.0) < 0.5
    if mode == "translate":
        oy = rng.integers(2 * AUGMENT_PAD + 1)
        ox = rng.integers(2 * AUGMENT_PAD + 1)
        padded = np.pad(img, ((0, 0), (AUGMENT_PAD, AUGMENT_PAD),
                              (AUGMENT_PAD, AUGMENT_PAD)))
        out = padded[:, oy:oy + h, ox:ox + w]
    elif mode == "scale":
        factor = rng.uniform(0.85, 1.15)
        nh = max(1, int(round(h * factor)))
        nw = max(1, int(round(w * factor)))
        iy = np.minimum((np.arange(nh) / factor).astype(np.int64), h - 1)
        ix = np.minimum((np.arange(nw) / factor).astype(np.int64), w - 1)
        resized = img[:, iy][:, :, ix]
        out = np.zeros_like(img)
        if nh >= h:
            sy, sx = (nh - h) // 2, (nw - w) // 2
            out = resized[:, sy:sy + h, sx:sx + w]
        else:
            dy, dx = (h - nh) // 2, (w - nw) // 2
            out[:, dy:dy + nh, dx:dx + nw] = resized
    else:
        raise ValueError(f"augment: unknown mode {mode!r}")
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    x: Tensor             # normalized float64 [N, C, H, W]
    labels: np.ndarray    # int64 [N]


def batch_iter(dataset: Dataset, batch_size: int, rng: Prng,
               drop_last: bool = False, stats: ChannelStats | None = None,
               augment_rng: Prng | None = None,
               augment_mode: str = "translate") -> Iterator[Batch]:
    """Yield normalized batches in a fresh uniform shuffle order.

    Deterministic given the rng streams.  With drop_last the trailing
    partial batch is discarded (floor(N/B) batches); the default keeps it,
    which is what makes 50000/128 come out to 391 steps per epoch.
    """
    if batch_size < 1:
        raise ValueError(f"batch_iter: batch_size must be >= 1, got {batch_size}")
    if stats is None:
        stats = ChannelStats.identity()
    n = len(dataset)
    order = rng.permutation(n)
    stop = (n // batch_size) * batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        imgs = dataset.images[idx]
        if augment_rng is not None:
            imgs = np.stack([augment_image(im, augment_rng, augment_mode)
                             for im in imgs])
        yield Batch(normalize_images(imgs, stats), dataset.labels[idx])


def batches_per_epoch(n: int, batch_size: int, drop_last: bool = False) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def gen_synthetic(n_classes: int, n_per_class: int, size: int, rng: Prng) -> Dataset:
    """Procedural images a small conv net separates quickly.

    Each class gets a distinct grating orientation (pi * c / n_classes), a
    mild class-specific channel tint (so class-conditional pixel means
    differ), plus a random-position Gaussian blob and pixel noise shared
    across classes as distractors.  Fully seeded; records interleave
    classes 0..K-1 repeatedly.
    """
    if n_classes < 1 or size < 1 or n_per_class < 0:
        raise ValueError(
            f"gen_synthetic: bad parameters classes={n_classes} "
            f"per_class={n_per_class} size={size}")
    n = n_classes * n_per_class
    images = np.zeros((n, 3, size, size), dtype=np.uint8)
    labels = np.tile(np.arange(n_classes, dtype=np.int64), n_per_class)

    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    yy = yy / size
    xx = xx / size
    # fixed per-class tint table, mild enough to keep orientation the main cue
    tints = 1.0 + 0.25 * np.sin(
        np.arange(n_classes)[:, None] * 2.1 + np.array([0.0, 2.1, 4.2])[None, :])

    for i in range(n):
        c = int(labels[i])
        theta = np.pi * c / n_classes
        freq = rng.uniform(2.0, 4.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        grating = np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
                         + phase)
        by = rng.uniform(0.2, 0.8)
        bx = rng.uniform(0.2, 0.8)
        blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * 0.15 ** 2))
        noise = rng.normal((3, size, size), std=0.04)
        img = 0.5 + 0.28 * grating[None] * tints[c][:, None, None] \
            + 0.12 * blob[None] + noise
        images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return Dataset(images, labels)
