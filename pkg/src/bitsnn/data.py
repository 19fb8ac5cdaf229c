"""Datasets: IDX (MNIST-style) files and a deterministic synthetic blob task."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim == 0:
        raise ValueError(f"{path}: bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x} "
                         "(expected unsigned-byte data, e.g. 0x00000801 or 0x00000803)")
    if len(raw) < 4 + 4 * ndim:
        raise ValueError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) != count:
        raise ValueError(f"{path}: IDX body has {len(body)} bytes, header promises {count}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, arr) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">HBB", 0, IDX_UBYTE, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(images_path, labels_path=None, num_classes: int | None = None, split: str = "train") -> Dataset:
    """IDX images (N, H, W) or (N, C, H, W) scaled so byte 255 -> 1.0."""
    imgs = read_idx(images_path)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    elif imgs.ndim != 4:
        raise ValueError(f"{images_path}: expected 3 or 4 IDX dimensions, got {imgs.ndim}")
    images = imgs.astype(np.float32) / np.float32(255.0)
    if labels_path is None:
        labels = np.zeros(images.shape[0], dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64).reshape(-1)
        if labels.shape[0] != images.shape[0]:
            raise ValueError("image and label counts differ")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images, labels, num_classes, split)


def gen_synthetic(seed: int = 0, n: int = 512, classes: int = 2, size: int = 8,
                  noise: float = 0.05, jitter: float = 0.6, split: str = "train") -> Dataset:
    """Gaussian blobs rendered on a ``size`` x ``size`` canvas.

    Each class has its own blob centre on a ring around the image centre;
    samples jitter the centre and add pixel noise. Classes are separable by
    construction for the default parameters.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    angle = 2 * np.pi * np.arange(classes) / classes
    radius = size / 4.0
    centres = np.stack([size / 2 - 0.5 + radius * np.sin(angle),
                        size / 2 - 0.5 + radius * np.cos(angle)], axis=1)
    c = centres[labels] + rng.normal(0.0, jitter, size=(n, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    img = np.exp(-d2 / (2 * 1.2 ** 2)) + rng.normal(0.0, noise, size=(n, size, size))
    img = np.clip(img, 0.0, 1.0)[:, None].astype(np.float32)
    return Dataset(img, labels.astype(np.int64), classes, split)


def synthetic_splits(seed: int = 0, n_train: int = 512, n_test: int = 256, classes: int = 2,
                     size: int = 8) -> tuple[Dataset, Dataset]:
    train = gen_synthetic(seed, n_train, classes, size, split="train")
    test = gen_synthetic(seed + 10_000, n_test, classes, size, split="test")
    return train, test
