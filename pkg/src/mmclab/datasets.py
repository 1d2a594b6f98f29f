"""Toy Gaussian blobs and IDX (MNIST-format) files, pixels in [0, 1]."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .geometry import generate_mm_centers

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    image_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be (N, p), got {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("inputs must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.split,
                       self.image_shape)


def blob_means(L: int, p: int, radius: float = 0.4) -> np.ndarray:
    """Simplex vertices in ``R^p`` shifted to the cube center.

    Coordinates stay within ``0.5 +- radius``.
    """
    mm = generate_mm_centers(1.0, p, L).centers
    return 0.5 + radius * mm / np.abs(mm).max()


def make_blobs(L: int, p: int, per_class: int, spread: float, seed: int = 0,
               radius: float = 0.4, split: str = "train") -> Dataset:
    """``per_class`` Gaussian samples around each simplex mean, clipped to [0, 1].

    Rows are grouped by class in label order.
    """
    if L < 2:
        raise ValueError(f"need at least 2 classes, got {L}")
    if not spread > 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    means = blob_means(L, p, radius)
    x = np.repeat(means, per_class, axis=0) + spread * rng.standard_normal((L * per_class, p))
    y = np.repeat(np.arange(L), per_class)
    return Dataset(np.clip(x, 0.0, 1.0), y, L, split)


def _read_idx(path, magic_expected):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    magic, = struct.unpack(">I", raw[:4])
    if magic != magic_expected:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{magic_expected:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise ValueError(f"{path}: truncated data, {len(raw) - header} of {count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, max_n: Optional[int] = None,
             num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image/label pair, scaling pixels by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    n = images.shape[0] if max_n is None else min(max_n, images.shape[0])
    shape = images.shape[1:]
    flat = images[:n].reshape(n, int(np.prod(shape))).astype(np.float64) / 255.0
    return Dataset(flat, labels[:n].astype(np.int64), num_classes, split, tuple(shape))


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write ``ds`` as IDX; pixels are rounded to the nearest 1/255."""
    shape = ds.image_shape or (ds.input_dim, 1)
    if int(np.prod(shape)) != ds.input_dim:
        raise ValueError(f"image_shape {shape} does not match input dim {ds.input_dim}")
    pixels = np.rint(ds.inputs * 255.0).astype(np.uint8)
    n = len(ds)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, *shape)
                                  + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + ds.labels.astype(np.uint8).tobytes())
