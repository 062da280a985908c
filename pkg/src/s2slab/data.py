"""Datasets: the container, IDX and CIFAR binary parsing, synthetic digits.

All images live as float32 [N, C, H, W] arrays in raw [0, 255] pixel units.
The synthetic corpus renders seven-segment digits with per-image Philox
streams, so any (size, seed) pair regenerates bit-identically on any
platform and survives an IDX round trip exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng


class DataError(ValueError):
    """Malformed dataset bytes or an inconsistent container."""


@dataclass
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W], values in [0, 255]
    labels: np.ndarray  # int64 [N]
    split: str
    checksum: str  # sha256 of the source bytes
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.size and not np.isfinite(self.images).all():
            raise DataError("non-finite pixel values")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 255.0):
            raise DataError("pixel values outside [0, 255]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, limit: int | None) -> "Dataset":
        """Deterministic prefix slice; the sample-limit convention."""
        if limit is None or limit >= len(self):
            return self
        return Dataset(
            self.images[:limit], self.labels[:limit], self.split, self.checksum, self.num_classes
        )


def iter_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


# ---------------------------------------------------------------------------
# idx
# ---------------------------------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path, split: str = "test", num_classes: int = 10) -> Dataset:
    """Parse the big-endian IDX pair (0x803 image file, 0x801 label file)."""
    hasher = hashlib.sha256()
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, "idx image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise DataError(f"bad idx image magic 0x{magic:08x}, expected 0x{_IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, n * h * w, "idx image payload")
        if f.read(1):
            raise DataError("trailing bytes after idx image payload")
    hasher.update(struct.pack(">IIII", magic, n, h, w) + raw)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float32)

    with open(labels_path, "rb") as f:
        magic, ln = struct.unpack(">II", _read_exact(f, 8, "idx label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise DataError(f"bad idx label magic 0x{magic:08x}, expected 0x{_IDX_LABELS_MAGIC:08x}")
        lraw = _read_exact(f, ln, "idx label payload")
        if f.read(1):
            raise DataError("trailing bytes after idx label payload")
    hasher.update(struct.pack(">II", magic, ln) + lraw)
    if ln != n:
        raise DataError(f"count mismatch: {n} images but {ln} labels")
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, split, hasher.hexdigest(), num_classes)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write the dataset back out as an IDX pair; pixels must be integers."""
    if ds.images.shape[1] != 1:
        raise DataError("idx stores single-channel images")
    if not np.array_equal(ds.images, np.round(ds.images)):
        raise DataError("idx stores bytes; pixel values must be integer-valued")
    n, _, h, w = ds.images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, h, w))
        f.write(ds.images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# cifar-10 binary
# ---------------------------------------------------------------------------

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-plane bytes


def load_cifar_bin(paths, split: str = "train", num_classes: int = 10) -> Dataset:
    """Concatenate CIFAR-10 binary batches into a [N, 3, 32, 32] dataset."""
    chunks = []
    labels = []
    hasher = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
            raise DataError(
                f"{path}: size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte record"
            )
        hasher.update(raw)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32))
    return Dataset(
        np.concatenate(chunks), np.concatenate(labels), split, hasher.hexdigest(), num_classes
    )


# ---------------------------------------------------------------------------
# synthetic seven-segment digits
# ---------------------------------------------------------------------------

# classic display layout in a unit box, endpoints as (x, y)
_SEGMENTS = {
    "A": ((0.22, 0.16), (0.78, 0.16)),
    "B": ((0.78, 0.16), (0.78, 0.50)),
    "C": ((0.78, 0.50), (0.78, 0.84)),
    "D": ((0.22, 0.84), (0.78, 0.84)),
    "E": ((0.22, 0.50), (0.22, 0.84)),
    "F": ((0.22, 0.16), (0.22, 0.50)),
    "G": ((0.22, 0.50), (0.78, 0.50)),
}

_DIGIT_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGEDC",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}

_SIDE = 28
_GLYPH_SCALE = 21.0

# low-contrast strokes on a noisy background keep the learned decision
# margins small in pixel terms, which the attack studies rely on
_AMPLITUDE = (30.0, 52.0)
_NOISE_SIGMA = 7.0


def _render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(-0.21, 0.21)
    s = rng.uniform(0.85, 1.12) * _GLYPH_SCALE
    shift = rng.uniform(-2.4, 2.4, size=2)
    thick = rng.uniform(1.15, 1.7)
    amp = rng.uniform(*_AMPLITUDE)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    center = (_SIDE - 1) / 2.0

    ys, xs = np.mgrid[0:_SIDE, 0:_SIDE]
    px = np.stack([xs, ys], axis=-1).astype(np.float64)
    img = np.zeros((_SIDE, _SIDE), dtype=np.float64)
    for name in _DIGIT_SEGMENTS[digit]:
        p0, p1 = (np.asarray(p, dtype=np.float64) for p in _SEGMENTS[name])
        jitter = rng.normal(0.0, 0.55, size=(2, 2))
        a = (rot @ ((p0 - 0.5) * s)) + center + shift + jitter[0]
        b = (rot @ ((p1 - 0.5) * s)) + center + shift + jitter[1]
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            continue
        t = np.clip(((px - a) @ ab) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        d = np.linalg.norm(px - closest, axis=-1)
        stroke = amp * np.clip(1.0 - (d / thick) ** 2, 0.0, 1.0)
        img = np.maximum(img, stroke)
    img += rng.normal(0.0, _NOISE_SIGMA, size=img.shape)
    return np.round(np.clip(img, 0.0, 255.0))


def synthetic_digits(n: int, seed: int, split: str = "train") -> Dataset:
    """Render n digits (balanced classes, shuffled order) from Philox streams."""
    if n < 1:
        raise DataError("synthetic corpus needs at least one image")
    images = np.zeros((n, 1, _SIDE, _SIDE), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    order = make_rng(seed, 0x5487FFE).permutation(n)
    for slot, original in enumerate(order):
        digit = int(original) % 10
        rng = make_rng(seed, int(original), 0xD161)
        images[slot, 0] = _render_digit(digit, rng)
        labels[slot] = digit
    checksum = hashlib.sha256(images.tobytes() + labels.tobytes()).hexdigest()
    return Dataset(images, labels, split, checksum, num_classes=10)
