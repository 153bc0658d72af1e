"""Synthetic dataset generation, raw-format I/O, and split management.

Images are stored as 8-bit pixels and exposed to the networks as floats in
[0, 1]. Generation, loading, and splitting are pure functions of their
arguments, so identical arguments give identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LoadError

IMAGES_MAGIC = b"ACAI"
LABELS_MAGIC = b"ACAL"


@dataclass
class Dataset:
    images: np.ndarray  # uint8, (count, channels, h, w)
    labels: np.ndarray  # int64, (count,)
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ConfigError(f"images must be uint8 (n, c, h, w), got "
                              f"{self.images.dtype} {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ConfigError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError("label outside [0, class_count)")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def floats(self):
        return self.images.astype(np.float32) / 255.0


def generate_synthetic(seed, num_samples, classes, size, channels=1, noise=0.08):
    """Class-conditional oriented stripe textures.

    Each class has its own stripe angle and frequency. With ``noise`` > 0,
    every sample gets a random phase and additive pixel noise; with noise off
    each class collapses to its canonical texture. Labels are assigned
    round-robin, so class counts are balanced within one sample.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if size < 8 or size % 4:
        raise ConfigError(f"size must be >= 8 and divisible by 4, got {size}")
    if num_samples < classes:
        raise ConfigError("need at least one sample per class")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    labels = np.arange(num_samples) % classes
    images = np.empty((num_samples, channels, size, size), dtype=np.uint8)
    for s in range(num_samples):
        c = labels[s]
        angle = np.pi * c / classes
        freq = 2.0 + c
        phase = rng.uniform(0.0, 2.0 * np.pi) if noise > 0 else 0.0
        proj = (xx * np.cos(angle) + yy * np.sin(angle)) / size
        base = 0.5 + 0.4 * np.sin(2.0 * np.pi * freq * proj + phase)
        for ch in range(channels):
            img = base + (rng.normal(0.0, noise, (size, size)) if noise > 0 else 0.0)
            images[s, ch] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), classes)


def save_raw(dataset, images_path, labels_path):
    n, c, h, w = dataset.images.shape
    with open(images_path, "wb") as f:
        f.write(IMAGES_MAGIC)
        f.write(struct.pack("<4I", n, c, h, w))
        f.write(dataset.images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(LABELS_MAGIC)
        f.write(struct.pack("<I", n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_raw(images_path, labels_path):
    with open(images_path, "rb") as f:
        blob = f.read()
    if blob[:4] != IMAGES_MAGIC:
        raise LoadError(f"bad images magic {blob[:4]!r}", offset=0)
    if len(blob) < 20:
        raise LoadError("truncated images header", offset=len(blob))
    n, c, h, w = struct.unpack_from("<4I", blob, 4)
    expected = 20 + n * c * h * w
    if len(blob) != expected:
        raise LoadError(f"images file has {len(blob)} bytes, expected {expected}",
                        offset=min(len(blob), expected))
    images = np.frombuffer(blob[20:], dtype=np.uint8).reshape(n, c, h, w).copy()

    with open(labels_path, "rb") as f:
        lblob = f.read()
    if lblob[:4] != LABELS_MAGIC:
        raise LoadError(f"bad labels magic {lblob[:4]!r}", offset=0)
    if len(lblob) < 8:
        raise LoadError("truncated labels header", offset=len(lblob))
    (ln,) = struct.unpack_from("<I", lblob, 4)
    if ln != n:
        raise LoadError(f"labels count {ln} does not match images count {n}", offset=4)
    expected = 8 + n
    if len(lblob) != expected:
        raise LoadError(f"labels file has {len(lblob)} bytes, expected {expected}",
                        offset=min(len(lblob), expected))
    labels = np.frombuffer(lblob[8:], dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, int(labels.max()) + 1 if n else 2)


def split(dataset, fraction, seed):
    """Seeded stratified split into (part_a, part_b); a gets ``fraction``."""
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.default_rng(seed)
    a_idx, b_idx = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        take = int(round(fraction * len(idx)))
        a_idx.extend(idx[:take])
        b_idx.extend(idx[take:])
    if not a_idx or not b_idx:
        raise ConfigError(f"fraction {fraction} leaves an empty part")
    a_idx, b_idx = np.array(sorted(a_idx)), np.array(sorted(b_idx))
    part_a = Dataset(dataset.images[a_idx], dataset.labels[a_idx], dataset.class_count)
    part_b = Dataset(dataset.images[b_idx], dataset.labels[b_idx], dataset.class_count)
    return part_a, part_b


def norm_stats(dataset):
    """Per-channel mean/std of the [0,1]-scaled pixels (compute on the
    training part, apply to every part)."""
    x = dataset.floats()
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-6)


def normalized_images(dataset, mean, std):
    x = dataset.floats()
    return (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
