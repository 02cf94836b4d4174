"""Synthetic attributed images and the GLK1 binary container.

Each image is 1xHxW: uniform background noise in [0, 0.2], a bright 3x3
patch in the quadrant given by the class label (0 top-left, 1 top-right,
2 bottom-left, 3 bottom-right) and, when the binary attribute is set, a
horizontal intensity ramp of amplitude 0.3. Pixel values are rounded to
float32 so that a GLK1 round trip is exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GLK1"
_HEADER = struct.Struct("<4sIII")
RAMP_AMPLITUDE = 0.3
PATCH = 3


class FormatError(ValueError):
    """A GLK1 file is malformed."""


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, 1, H, W) float64, values in [0, 1]
    labels: np.ndarray  # (N,) class in 0..3
    attributes: np.ndarray  # (N,) 0/1
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticDataset):
            return NotImplemented
        return (
            self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.attributes, other.attributes)
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def pairs(self, indices=None) -> list[tuple[np.ndarray, int]]:
        """``(x, y)`` pairs for training and gradient computations."""
        if indices is None:
            indices = range(len(self))
        return [(self.images[i], int(self.labels[i])) for i in indices]

    def split_by_attribute(self) -> tuple[list, list]:
        """(samples without the attribute, samples with it)."""
        idx0 = np.flatnonzero(self.attributes == 0)
        idx1 = np.flatnonzero(self.attributes == 1)
        return self.pairs(idx0), self.pairs(idx1)


def _balanced(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def synth_dataset(n: int, height: int, width: int, seed: int) -> SyntheticDataset:
    if height < 8 or width < 8:
        raise ValueError(f"images must be at least 8x8, got {height}x{width}")
    if n < 8:
        raise ValueError(f"need at least 8 samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = _balanced(n, 4, rng)
    attributes = _balanced(n, 2, rng)
    images = rng.uniform(0.0, 0.2, size=(n, 1, height, width))
    qh, qw = height // 2, width // 2
    ramp = RAMP_AMPLITUDE * np.linspace(0.0, 1.0, width)
    for i in range(n):
        top = (labels[i] // 2) * qh + rng.integers(0, qh - PATCH + 1)
        left = (labels[i] % 2) * qw + rng.integers(0, qw - PATCH + 1)
        images[i, 0, top:top + PATCH, left:left + PATCH] = rng.uniform(0.8, 1.0)
        if attributes[i]:
            images[i, 0] += ramp[None, :]
    images = np.clip(images, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return SyntheticDataset(images, labels.astype(np.int64), attributes.astype(np.int64), seed)


def file_size(n: int, height: int, width: int) -> int:
    return _HEADER.size + n * (4 * height * width + 2)


def save_dataset(dataset: SyntheticDataset, path) -> None:
    n, (c, h, w) = len(dataset), dataset.shape
    if c != 1:
        raise ValueError("GLK1 stores single-channel images only")
    record = np.dtype([("pixels", "<f4", (h * w,)), ("label", "u1"), ("attr", "u1")])
    rows = np.empty(n, dtype=record)
    rows["pixels"] = dataset.images.reshape(n, h * w)
    rows["label"] = dataset.labels
    rows["attr"] = dataset.attributes
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(MAGIC, n, h, w))
            fh.write(rows.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset from {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, file ends at byte offset {len(blob)}")
    magic, n, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    expected = file_size(n, h, w)
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for N={n}, H={h}, W={w}; "
            f"size mismatch at byte offset {min(len(blob), expected)}"
        )
    record = np.dtype([("pixels", "<f4", (h * w,)), ("label", "u1"), ("attr", "u1")])
    rows = np.frombuffer(blob, dtype=record, offset=_HEADER.size, count=n)
    images = rows["pixels"].astype(np.float64).reshape(n, 1, h, w)
    return SyntheticDataset(images, rows["label"].astype(np.int64), rows["attr"].astype(np.int64))
