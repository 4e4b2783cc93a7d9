"""Dataset container, IDX file loading, and synthetic data generation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SOURCE_IDX = "idx"
SOURCE_SYNTHETIC = "synthetic"


@dataclass
class Dataset:
    """Images [n, C, H, W] as float64 in [0, 1] with integer labels [n]."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: str
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be [n, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConsistencyError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels"
            )
        if len(self) == 0:
            raise ConfigError("dataset is empty")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConsistencyError(
                f"labels must lie in [0, {self.num_classes}), found range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]


def _read_exact(handle, count: int, path: str) -> bytes:
    data = handle.read(count)
    if len(data) != count:
        raise FormatError(f"{path}: truncated, wanted {count} bytes, got {len(data)}")
    return data


def _expect_end(handle, path: str) -> None:
    if handle.read(1):
        raise FormatError(f"{path}: trailing data after the declared payload")


def load_idx(images_path: str, labels_path: str, split: str = "train") -> Dataset:
    """Read an images/labels file pair in the big-endian IDX layout."""
    with open(images_path, "rb") as handle:
        magic, count, height, width = struct.unpack(
            ">IIII", _read_exact(handle, 16, images_path)
        )
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x}, "
                f"expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        payload = _read_exact(handle, count * height * width, images_path)
        _expect_end(handle, images_path)
    images = (
        np.frombuffer(payload, dtype=np.uint8)
        .reshape(count, 1, height, width)
        .astype(np.float64)
        / 255.0
    )

    with open(labels_path, "rb") as handle:
        magic, label_count = struct.unpack(">II", _read_exact(handle, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, "
                f"expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        raw = _read_exact(handle, label_count, labels_path)
        _expect_end(handle, labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if label_count != count:
        raise ConsistencyError(
            f"{count} images in {images_path} but {label_count} labels in {labels_path}"
        )
    num_classes = int(labels.max()) + 1 if label_count else 1
    return Dataset(images, labels, num_classes, source=SOURCE_IDX, split=split)


def make_synthetic(num_classes: int, n: int, size: int, seed: int = 0,
                   noise_std: float = 0.05) -> Dataset:
    """Class-conditional oriented soft bars on a noisy background.

    Class c draws a bar through the (jittered) image center at angle
    c*pi/num_classes, amplitude 0.8, with Gaussian pixel noise added
    independently per channel.  Labels are balanced to within one
    sample and the order is shuffled.  At the default noise level the
    per-class mean images stay separated by at least 5x the noise std.
    """
    if num_classes < 1:
        raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
    if n < num_classes:
        raise ConfigError(f"need n >= num_classes, got n={n}, classes={num_classes}")
    if size < 4:
        raise ConfigError(f"size must be >= 4, got {size}")
    if not 0 <= noise_std < 1:
        raise ConfigError(f"noise_std must be in [0, 1), got {noise_std}")

    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    labels = labels[rng.permutation(n)]

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    half_width = max(1.5, size / 16.0)
    amplitude = 0.8

    images = np.empty((n, 3, size, size), dtype=np.float64)
    center = (size - 1) / 2.0
    for i in range(n):
        theta = labels[i] * math.pi / num_classes
        cx = center + rng.uniform(-2.0, 2.0)
        cy = center + rng.uniform(-2.0, 2.0)
        # perpendicular distance to the line through (cx, cy) at angle theta
        dist = np.abs((xs - cx) * math.sin(theta) - (ys - cy) * math.cos(theta))
        bar = amplitude * np.exp(-((dist / half_width) ** 2))
        for channel in range(3):
            noisy = bar + rng.normal(0.0, noise_std, size=(size, size))
            images[i, channel] = np.clip(noisy, 0.0, 1.0)

    return Dataset(images, labels, num_classes, source=SOURCE_SYNTHETIC, split="train")
