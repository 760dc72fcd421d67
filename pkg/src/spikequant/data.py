"""Datasets: IDX files, the bundled digits set and a synthetic generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError

IDX_UBYTE = 0x08
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, channels, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    tag: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"images must be (n, channels, H, W), got shape {images.shape}")
        if len(images) != len(labels):
            raise DatasetError(f"{len(images)} images but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index, tag: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.tag if tag is None else tag)

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle then split into (first ``fraction``, rest)."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.take(order[:cut], f"{self.tag}:train"), self.take(order[cut:], f"{self.tag}:val")

    def subset(self, size: int | None, seed: int) -> "Dataset":
        """A fixed seeded subset kept in ascending index order; ``None`` or a size >= n returns self."""
        if size is None or size >= len(self):
            return self
        if size <= 0:
            raise DatasetError("subset size must be positive")
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=size, replace=False))
        return self.take(idx, f"{self.tag}:subset{size}@{seed}")


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file into an ``uint8`` array of its declared shape."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: bad IDX magic")
    dtype, ndim = raw[2], raw[3]
    if dtype != IDX_UBYTE:
        raise DatasetError(f"{path}: unsupported IDX element type 0x{dtype:02x}")
    if ndim == 0 or len(raw) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise DatasetError(f"{path}: truncated IDX payload ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise DatasetError(f"{path}: {len(body) - expected} trailing bytes after IDX payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DatasetError("only uint8 IDX files are written")
    header = bytes([0, 0, IDX_UBYTE, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path=None, num_classes: int | None = None, tag: str = "idx") -> Dataset:
    """Load an IDX image file (and optional label file) scaled to [0, 1].

    Image files must be 3-d ``(n, rows, cols)`` with magic 0x803; label files
    1-d with magic 0x801. Without a label file every label is 0.
    """
    with _open(images_path) as f:
        magic = struct.unpack(">I", f.read(4).rjust(4, b"\xff"))[0]
    if magic != IMAGE_MAGIC:
        raise DatasetError(f"{images_path}: expected image magic 0x{IMAGE_MAGIC:08x}, got 0x{magic:08x}")
    images = read_idx(images_path)
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise DatasetError(f"{labels_path}: label file must be 1-d, got {labels.ndim} dims")
        if len(labels) != len(images):
            raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    classes = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images[:, None].astype(np.float32) / 255.0, labels.astype(np.int64), classes, tag)


def generate_synthetic(seed: int, n: int, classes: int, image_size=(32, 32), noise: float = 0.15) -> Dataset:
    """Balanced class-conditioned patterns.

    Each class gets a fixed random prototype made of a few bright rectangles;
    samples are the prototype shifted by at most one pixel plus uniform noise,
    clipped to [0, 1].
    """
    if n <= 0 or classes <= 0:
        raise DatasetError("n and classes must be positive")
    h, w = image_size
    rng = np.random.default_rng(seed)
    protos = np.zeros((classes, h, w), dtype=np.float32)
    for c in range(classes):
        for _ in range(3):
            y0, x0 = rng.integers(0, h - h // 4), rng.integers(0, w - w // 4)
            dy, dx = rng.integers(h // 8, h // 3), rng.integers(w // 8, w // 3)
            protos[c, y0 : y0 + dy, x0 : x0 + dx] = 1.0
    labels = rng.permutation(np.arange(n) % classes)
    shifts = rng.integers(-1, 2, size=(n, 2))
    images = np.empty((n, 1, h, w), dtype=np.float32)
    for i, (lab, (sy, sx)) in enumerate(zip(labels, shifts)):
        images[i, 0] = np.roll(protos[lab], (sy, sx), axis=(0, 1))
    images += rng.uniform(-noise, noise, size=images.shape).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, classes, f"synthetic(seed={seed},n={n},classes={classes})")


def load_digits(image_size=(32, 32)) -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits, upscaled by pixel repetition."""
    from sklearn.datasets import load_digits as _load

    bunch = _load()
    imgs = bunch.images.astype(np.float32) / 16.0
    h, w = image_size
    if h % 8 or w % 8:
        raise DatasetError("digits image size must be a multiple of 8")
    imgs = np.kron(imgs, np.ones((1, h // 8, w // 8), dtype=np.float32))
    return Dataset(imgs[:, None], bunch.target, 10, "digits")
