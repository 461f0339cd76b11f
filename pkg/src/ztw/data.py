"""Deterministic datasets: synthetic generators, an IDX reader, splits.

Everything here is reproducible bit-for-bit from (spec, seed) via
SplitMix64 streams; the content hash is computed over a canonical
little-endian serialization so it is stable across platforms.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DataFormatError
from .rng import SplitMix64


@dataclass
class Dataset:
    """Immutable sample collection: inputs[N, ...], integer labels[N]."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "full"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ConfigError(
                f"inputs ({self.inputs.shape}) and labels ({self.labels.shape}) disagree on N")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def sample_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def content_hash(self) -> str:
        """SHA-256 over a canonical little-endian byte layout."""
        h = hashlib.sha256()
        h.update(b"ZTW.DATASET.V1")
        h.update(struct.pack("<II", self.num_classes, self.inputs.ndim))
        for e in self.inputs.shape:
            h.update(struct.pack("<I", e))
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def subset(self, idx: np.ndarray, split: str) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, split=split)


@dataclass
class SpiralSpec:
    """K interleaved spiral arms in the plane; stand-in classification task."""

    classes: int = 4
    per_class: int = 500
    noise: float = 0.2
    revolutions: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2 or self.per_class < 1 or self.noise < 0:
            raise ConfigError(f"invalid spiral spec: {self}")


def gen_spirals(spec: SpiralSpec) -> Dataset:
    """Arm k, sample i: t = i/(N-1), radius t, angle 2*pi*k/K + revolutions*t*2*pi + noise."""
    rng = SplitMix64(spec.seed)
    k_cls, n = spec.classes, spec.per_class
    pts = np.zeros((k_cls * n, 2))
    labels = np.zeros(k_cls * n, dtype=np.int64)
    row = 0
    for k in range(k_cls):
        for i in range(n):
            t = i / (n - 1) if n > 1 else 0.0
            eps = rng.normal() * spec.noise
            theta = 2.0 * np.pi * k / k_cls + spec.revolutions * t * 2.0 * np.pi + eps
            pts[row] = (t * np.cos(theta), t * np.sin(theta))
            labels[row] = k
            row += 1
    return Dataset(pts, labels, k_cls)


# 5x7 glyph bitmaps for the built-in digit task (one string row per pixel row)
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00110", "01000", "10000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


@dataclass
class DigitSpec:
    """Procedural 28x28 digit images: jittered, rescaled glyphs plus noise.

    Ten classes; a desk-scale substitute for handwritten-digit data that
    needs no files on disk.
    """

    per_class: int = 100
    noise: float = 0.25
    max_shift: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.per_class < 1 or self.noise < 0 or self.max_shift < 0:
            raise ConfigError(f"invalid digit spec: {self}")


def _glyph_array(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    return np.array([[float(ch) for ch in r] for r in rows])


def gen_digits(spec: DigitSpec) -> Dataset:
    rng = SplitMix64(spec.seed)
    n_total = 10 * spec.per_class
    imgs = np.zeros((n_total, 1, 28, 28))
    labels = np.zeros(n_total, dtype=np.int64)
    row = 0
    for digit in range(10):
        glyph = np.kron(_glyph_array(digit), np.ones((3, 3)))  # 21 x 15
        for _ in range(spec.per_class):
            canvas = np.zeros((28, 28))
            dy = 3 + rng.randint(2 * spec.max_shift + 1) - spec.max_shift
            dx = 6 + rng.randint(2 * spec.max_shift + 1) - spec.max_shift
            dy = min(max(dy, 0), 28 - 21)
            dx = min(max(dx, 0), 28 - 15)
            intensity = 0.7 + 0.3 * rng.uniform()
            canvas[dy:dy + 21, dx:dx + 15] = glyph * intensity
            if spec.noise > 0:
                canvas = canvas + rng.normal_array((28, 28), sigma=spec.noise)
            imgs[row, 0] = np.clip(canvas, 0.0, 1.0)
            labels[row] = digit
            row += 1
    return Dataset(imgs, labels, 10)


# ---------------------------------------------------------------------------
# IDX files (big-endian, u8 payload)

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, n: int, offset: int, path: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(
            f"{path}: truncated at byte {offset + len(buf)} (wanted {n} more bytes)")
    return buf


def read_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """Parse an images/labels IDX pair; pixels are scaled into [0, 1]."""
    with open(images_path, "rb") as f:
        head = _read_exact(f, 16, 0, images_path)
        magic, n, h, w = struct.unpack(">IIII", head)
        if magic != _IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic 0x{magic:08x} at byte 0 "
                f"(expected 0x{_IDX_IMAGES_MAGIC:08x})")
        raw = _read_exact(f, n * h * w, 16, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(n, 1, h, w) / 255.0

    with open(labels_path, "rb") as f:
        head = _read_exact(f, 8, 0, labels_path)
        magic, n_labels = struct.unpack(">II", head)
        if magic != _IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at byte 0 "
                f"(expected 0x{_IDX_LABELS_MAGIC:08x})")
        raw = _read_exact(f, n_labels, 8, labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n_labels != n:
        raise DataFormatError(
            f"image count {n} does not match label count {n_labels} "
            f"({images_path} vs {labels_path})")
    return Dataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# splits


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def split(dataset: Dataset, fractions, seed: int) -> Splits:
    """Deterministic shuffled partition into train/val/test.

    The three parts are disjoint and cover the input. A strictly positive
    fraction that rounds to zero samples is a configuration error; a zero
    fraction legitimately yields an empty part.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset)
    perm = SplitMix64(seed).permutation(n)
    bounds = [int(round(sum(fractions[:i + 1]) * n)) for i in range(3)]
    bounds[-1] = n
    starts = [0] + bounds[:-1]
    names = ("train", "val", "test")
    parts = []
    for name, f, lo, hi in zip(names, fractions, starts, bounds):
        if f > 0 and hi - lo == 0:
            raise ConfigError(f"{name} fraction {f} yields an empty split for N={n}")
        parts.append(dataset.subset(perm[lo:hi], split=name))
    return Splits(*parts)
