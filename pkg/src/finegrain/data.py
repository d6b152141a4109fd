"""CIFAR binary ingestion, the CIFAR augmentation, and synthetic datasets."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import Rng

DATA_DIR_ENV = "FINEGRAIN_DATA_DIR"
IMAGE_BYTES = 3 * 32 * 32
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]


class CifarFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return replace(self, images=self.images[:n], labels=self.labels[:n])

    def batches(self, batch_size: int, rng: Rng | None = None, augment: bool = False):
        """Yield (images, labels); shuffled when an Rng is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            x = self.images[idx]
            if augment:
                x = augment_cifar(x, rng)
            yield x, self.labels[idx]


# -- binary format ---------------------------------------------------------------

def read_cifar_bin(path: str | Path, label_bytes: int = 1, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Parse records of ``label_bytes`` label bytes then 3072 pixel bytes
    (R, G, B planes, row-major).  The last label byte is the class."""
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    rec = label_bytes + IMAGE_BYTES
    if raw.size % rec:
        raise CifarFormatError(f"{path}: truncated record {raw.size // rec} ({raw.size % rec} of {rec} bytes)")
    recs = raw.reshape(-1, rec)
    labels = recs[:, label_bytes - 1].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise CifarFormatError(f"{path}: record {i} has label {labels[i]} >= {num_classes}")
    pixels = recs[:, label_bytes:].reshape(-1, 3, 32, 32)
    return pixels, labels


def write_cifar_bin(ds: Dataset, path: str | Path, label_bytes: int = 1) -> None:
    """Inverse of :func:`read_cifar_bin` for datasets holding pixel/255 values."""
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    head = np.zeros((len(ds), label_bytes), dtype=np.uint8)
    head[:, -1] = ds.labels
    Path(path).write_bytes(np.concatenate([head, pixels], axis=1).tobytes())


def resolve_data_dir(directory: str | Path | None = None) -> Path:
    d = Path(directory or os.environ.get(DATA_DIR_ENV, "data"))
    nested = d / "cifar-10-batches-bin"
    return nested if nested.is_dir() else d


def load_cifar10(directory: str | Path | None = None, split: str = "train") -> Dataset:
    d = resolve_data_dir(directory)
    files = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
    missing = [f for f in files if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing in {d}: {', '.join(missing)}")
    parts = [read_cifar_bin(d / f) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    return Dataset(pixels.astype(np.float32) / 255.0, labels, 10, split)


def load_cifar100(directory: str | Path | None = None, split: str = "train") -> Dataset:
    """CIFAR-100 binary: coarse label byte, fine label byte, pixels; fine labels used."""
    d = Path(directory or os.environ.get(DATA_DIR_ENV, "data"))
    if (d / "cifar-100-binary").is_dir():
        d = d / "cifar-100-binary"
    f = d / ("train.bin" if split == "train" else "test.bin")
    if not f.is_file():
        raise FileNotFoundError(f"CIFAR-100 file missing: {f}")
    pixels, labels = read_cifar_bin(f, label_bytes=2, num_classes=100)
    return Dataset(pixels.astype(np.float32) / 255.0, labels, 100, split)


# -- augmentation and normalization --------------------------------------------------

def augment_cifar(img: np.ndarray, rng: Rng, pad: int = 2, offset=None, flip=None) -> np.ndarray:
    """Zero-pad by ``pad``, crop back to the original size at a uniform
    offset, and flip horizontally with probability 1/2.

    Works on one (C, H, W) image or an (N, C, H, W) batch (independent draws
    per image).  ``offset``/``flip`` force the random choices.
    """
    single = img.ndim == 3
    batch = img[None] if single else img
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i in range(n):
        if offset is None:
            dy, dx = int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1))
        else:
            dy, dx = offset
        do_flip = bool(rng.random() < 0.5) if flip is None else flip
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if do_flip else crop
    return out[0] if single else out


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize_channels(train: Dataset, *others: Dataset, stats=None):
    """Standardize every dataset with per-channel statistics of ``train``.

    Returns the normalized datasets in argument order followed by
    (mean, std).
    """
    mean, std = stats if stats is not None else channel_stats(train)
    if np.any(std == 0):
        raise FloatingPointError(f"zero standard deviation in channel(s) {np.nonzero(std == 0)[0].tolist()}")
    m = mean.reshape(1, -1, 1, 1)
    s = std.reshape(1, -1, 1, 1)

    def apply(ds):
        return replace(ds, images=((ds.images - m) / s).astype(np.float32))

    return (apply(train), *(apply(o) for o in others), (mean, std))


# -- synthetic data ------------------------------------------------------------------

def synthetic_dataset(kind: str, n: int, classes: int, seed: int, shape=(3, 32, 32),
                      separation: float = 10.0, split: str = "train") -> Dataset:
    """Deterministic labelled image-shaped data.

    gaussian_blobs: class centers with pairwise distance about ``separation``
    around which the noise vector has unit RMS norm.
    linearly_separable: each image is a per-channel offset plus small noise;
    labels are the argmax of a fixed linear map of the offsets, with a margin.
    """
    rng = Rng(seed)
    if n == 0:
        return Dataset(np.zeros((0, *shape), np.float32), np.zeros(0, np.int64), classes, split)
    dim = int(np.prod(shape))
    if kind == "gaussian_blobs":
        centers = rng.normal((classes, dim), dtype=np.float64)
        centers *= separation / np.sqrt(2.0) / np.linalg.norm(centers, axis=1, keepdims=True)
        labels = rng.integers(0, classes, size=n).astype(np.int64)
        x = centers[labels] + rng.normal((n, dim), dtype=np.float64) / np.sqrt(dim)
        return Dataset(x.reshape(n, *shape).astype(np.float32), labels, classes, split)
    if kind == "linearly_separable":
        c = shape[0]
        w = rng.normal((classes, c), dtype=np.float64)
        offsets, labels = [], []
        while len(labels) < n:
            v = rng.normal((4 * n, c), dtype=np.float64)
            scores = v @ w.T
            top2 = np.sort(scores, axis=1)[:, -2:]
            keep = (top2[:, 1] - top2[:, 0]) > 0.5
            offsets.extend(v[keep])
            labels.extend(np.argmax(scores[keep], axis=1))
        v = np.asarray(offsets[:n])
        y = np.asarray(labels[:n], dtype=np.int64)
        x = v[:, :, None, None] + 0.1 * rng.normal((n, *shape), dtype=np.float64)
        return Dataset(x.astype(np.float32), y, classes, split)
    raise ValueError(f"unknown synthetic kind {kind!r}")
