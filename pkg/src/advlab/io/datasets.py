"""Dataset loaders: MNIST-family IDX files, CIFAR-10 binary batches, and a synthetic set.

All loaders return pixels as float64 in [0, 1] with layout [N, C, H, W].
MNIST-family images are resized from 28x28 to 32x32 bilinearly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..functional import bilinear_matrix

IMAGE_SIZE = 32
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
MAX_IDX_ELEMENTS = 1 << 31

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}
DATASETS = ("mnist", "fmnist", "cifar10", "synthetic")


class DatasetFormatError(ValueError):
    """Malformed dataset bytes."""


class IdxFormatError(DatasetFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class CifarFormatError(DatasetFormatError):
    pass


@dataclass
class DatasetHandle:
    name: str
    split: str
    images: np.ndarray
    labels: np.ndarray
    subset_size: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def take(self, n: int | None) -> "DatasetHandle":
        """First ``n`` examples (the desk-scale subset cap)."""
        if n is None or n >= len(self):
            return self
        return DatasetHandle(self.name, self.split, self.images[:n], self.labels[:n], n, self.meta)


# -- IDX ------------------------------------------------------------------------------


def resize_bilinear(images: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Resize the last two axes to ``size`` x ``size`` (half-pixel bilinear)."""
    H, W = images.shape[-2:]
    if (H, W) == (size, size):
        return images
    mh = bilinear_matrix(H, size)
    mw = bilinear_matrix(W, size)
    return np.clip(mh @ images @ mw.T, 0.0, 1.0)


def parse_idx(data: bytes, resize_to: int | None = IMAGE_SIZE) -> np.ndarray:
    """Decode IDX bytes: images -> float [N, 1, S, S]; labels -> int64 [N]."""
    if len(data) < 4:
        raise IdxTruncatedError(f"IDX header needs 4 bytes, got {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError(f"IDX header needs {header} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > MAX_IDX_ELEMENTS:
        raise IdxFormatError(f"IDX dimensions {dims} overflow the element limit")
    payload = len(data) - header
    if payload < count:
        raise IdxTruncatedError(f"IDX payload truncated: expected {count} bytes, found {payload}")
    if payload > count:
        raise IdxFormatError(f"IDX payload has {payload - count} trailing bytes")
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=header)
    if ndim == 1:
        return raw.astype(np.int64)
    n, rows, cols = dims
    if n and (rows == 0 or cols == 0):
        raise IdxFormatError(f"IDX image dimensions {rows}x{cols} are empty")
    images = (raw.astype(np.float64) / 255.0).reshape(n, 1, rows, cols)
    return resize_bilinear(images, resize_to) if resize_to and n else images


def load_idx(path: str | os.PathLike, resize_to: int | None = IMAGE_SIZE) -> np.ndarray:
    return parse_idx(Path(path).read_bytes(), resize_to)


def encode_idx(array: np.ndarray) -> bytes:
    """Encode uint8 images [N, H, W] or labels [N] as IDX bytes."""
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError("IDX encoding supports rank 1 (labels) or rank 3 (images)")
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


# -- CIFAR-10 ------------------------------------------------------------------------


def parse_cifar10(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records (label byte + planar R, G, B 32x32)."""
    if len(data) % CIFAR_RECORD:
        raise CifarFormatError(
            f"CIFAR-10 length {len(data)} is not a multiple of {CIFAR_RECORD}-byte records"
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise CifarFormatError(f"CIFAR-10 label {labels.max()} out of range")
    images = records[:, 1:].astype(np.float64).reshape(-1, 3, 32, 32) / 255.0
    return images, labels


def load_cifar10_binary(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    return parse_cifar10(Path(path).read_bytes())


# -- synthetic -----------------------------------------------------------------------


def synthetic_dataset(seed: int, n: int, classes: int = 10, channels: int = 1,
                      size: int = IMAGE_SIZE, split: str = "train") -> DatasetHandle:
    """Oriented-bar images: class k is a bar at angle k * 180/classes degrees.

    Position, length, thickness and brightness are jittered per image and
    Gaussian pixel noise is added; labels are balanced to within one.
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    theta = labels * (np.pi / classes) + rng.uniform(-0.05, 0.05, n)
    centre = size / 2 - 0.5 + rng.uniform(-3.0, 3.0, (n, 2))
    length = rng.uniform(0.55, 0.8, n) * size
    thickness = rng.uniform(2.0, 3.5, n)
    brightness = rng.uniform(0.75, 1.0, n)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx[None] - centre[:, 0, None, None]
    dy = yy[None] - centre[:, 1, None, None]
    cos, sin = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    across = np.abs(-sin * dx + cos * dy)
    along = np.abs(cos * dx + sin * dy)
    bar = np.clip(thickness[:, None, None] / 2 - across + 0.5, 0.0, 1.0)
    bar *= np.clip(length[:, None, None] / 2 - along + 0.5, 0.0, 1.0)
    img = brightness[:, None, None] * bar
    img = img[:, None].repeat(channels, axis=1)
    img = np.clip(img + rng.normal(0.0, 0.04, img.shape), 0.0, 1.0)
    return DatasetHandle("synthetic", split, img, labels.astype(np.int64), None,
                         {"seed": seed, "classes": classes})


def load_dataset(name: str, split: str, data_dir: str | os.PathLike | None = None,
                 subset: int | None = None, seed: int = 0,
                 synthetic_size: int | None = None) -> DatasetHandle:
    """Load ``split`` of ``name``; ``subset`` caps the example count."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if name == "synthetic":
        n = synthetic_size or subset or (2000 if split == "train" else 500)
        # train and test draws come from disjoint seeds
        return synthetic_dataset(2 * seed + (split == "test"), n, split=split).take(subset)
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if data_dir is None:
        raise FileNotFoundError(f"dataset {name!r} needs a data directory")
    root = Path(data_dir)
    if name in ("mnist", "fmnist"):
        img_file, lbl_file = MNIST_FILES[split]
        images = load_idx(_existing(root / img_file))
        labels = load_idx(_existing(root / lbl_file))
        if images.ndim != 4 or labels.ndim != 1:
            raise IdxFormatError("image/label files are swapped or malformed")
    else:
        parts = [load_cifar10_binary(_existing(root / f)) for f in CIFAR_FILES[split]]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    return DatasetHandle(name, split, images, labels).take(subset)


def _existing(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    return path
