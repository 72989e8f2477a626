"""Datasets: IDX (MNIST-style) files and built-in synthetic classification tasks."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    def __post_init__(self):
        for x, y, part in ((self.x_train, self.y_train, "train"), (self.x_val, self.y_val, "validation")):
            if len(x) != len(y):
                raise ValueError(f"{part}: {len(x)} inputs but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{part}: labels outside [0, {self.num_classes})")

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> tuple[int, np.ndarray]:
    """Return ``(magic, array)`` for an unsigned-byte IDX file."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} (expected unsigned-byte IDX)")
    ndim = magic & 0xFF
    if ndim == 0 or len(data) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    n = int(np.prod(dims, dtype=np.int64))
    body = data[4 + 4 * ndim :]
    if len(body) != n:
        raise IdxFormatError(f"{path}: expected {n} data bytes, found {len(body)}")
    return magic, np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError("only unsigned-byte IDX files are supported")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images flattened to rows and scaled to [0, 1]; labels as int64."""
    magic, images = read_idx(images_path)
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    magic, labels = read_idx(labels_path)
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def idx_dataset(train_images, train_labels, val_images=None, val_labels=None,
                val_fraction: float = 0.1, limit: int | None = None, num_classes: int = 10) -> Dataset:
    x, y = load_idx(train_images, train_labels)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    if val_images is not None:
        xv, yv = load_idx(val_images, val_labels)
        if limit is not None:
            xv, yv = xv[:limit], yv[:limit]
    else:
        cut = len(x) - int(round(len(x) * val_fraction))
        x, xv, y, yv = x[:cut], x[cut:], y[:cut], y[cut:]
    return Dataset(x, y, xv, yv, num_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "blobs"  # "blobs" or "arcs"
    classes: int = 4
    n_per_class: int = 625
    noise: float = 0.3
    dim: int = 2
    val_fraction: float = 0.2
    radius: float = 1.5

    def validate(self) -> None:
        if self.kind not in ("blobs", "arcs"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_per_class < 50:
            raise ValueError("need at least 50 points per class")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


def _blob_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(spec.classes) / spec.classes
    centers = np.zeros((spec.classes, spec.dim))
    centers[:, 0] = spec.radius * np.cos(ang)
    centers[:, 1] = spec.radius * np.sin(ang)
    if spec.dim > 2:
        centers[:, 2:] = rng.normal(scale=spec.radius / 2, size=(spec.classes, spec.dim - 2))
    return centers


def make_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    k, n = spec.classes, spec.n_per_class
    labels = np.repeat(np.arange(k), n)
    if spec.kind == "blobs":
        x = _blob_centers(spec, rng)[labels]
    else:
        # k interleaved half-circles; for k=2 these are the usual "moons"
        t = rng.uniform(0.0, np.pi, size=k * n)
        rot = 2.0 * np.pi * labels / k
        arc = np.stack([np.cos(t) - 0.5, np.sin(t) - 0.25], axis=1)
        c, s = np.cos(rot), np.sin(rot)
        planar = np.stack([c * arc[:, 0] - s * arc[:, 1], s * arc[:, 0] + c * arc[:, 1]], axis=1)
        x = np.zeros((k * n, spec.dim))
        x[:, :2] = spec.radius * planar
    x = x + rng.normal(scale=spec.noise, size=x.shape) if spec.noise > 0 else x
    order = rng.permutation(k * n)
    x, labels = x[order], labels[order]
    cut = k * n - int(round(k * n * spec.val_fraction))
    return Dataset(x[:cut], labels[:cut], x[cut:], labels[cut:], k)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out
