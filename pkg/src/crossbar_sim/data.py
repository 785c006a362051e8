"""Datasets: IDX (MNIST format) files and synthetic Gaussian blobs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import RandomStream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path: str | Path, magic: int) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DatasetFormatError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write uint8 ``array`` as an IDX file (gzipped if the name ends in .gz)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{directory}: missing {stem}[.gz]")


def load_idx_pair(images: str | Path, labels: str | Path, subset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    x = read_idx(images, IMAGE_MAGIC)
    y = read_idx(labels, LABEL_MAGIC)
    if x.shape[0] != y.shape[0]:
        raise DatasetFormatError("image and label counts differ")
    if subset:
        if subset > x.shape[0]:
            raise ValueError(f"subset size {subset} larger than dataset ({x.shape[0]})")
        x, y = x[:subset], y[:subset]
    x = x.reshape(x.shape[0], -1).astype(np.float32) / 255.0
    return x, y.astype(np.int64)


def load_idx_dataset(path: str | Path, train_subset: int = 0, test_subset: int = 0) -> Dataset:
    """Load ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` from a directory."""
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: dataset directory not found")
    x_tr, y_tr = load_idx_pair(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"), train_subset)
    x_te, y_te = load_idx_pair(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"), test_subset)
    return Dataset(x_tr, y_tr, x_te, y_te)


def synthetic_blobs(
    n_samples: int, n_features: int, n_classes: int, spread: float, stream: RandomStream, test_fraction: float = 0.25
) -> Dataset:
    """Isotropic Gaussian clusters around random centres in [-1, 1]^n."""
    centres = stream.uniform((n_classes, n_features), -1.0, 1.0)
    labels = np.arange(n_samples) % n_classes
    labels = labels[stream.permutation(n_samples)]
    x = centres[labels] + spread * stream.gaussian((n_samples, n_features))
    n_test = int(round(n_samples * test_fraction))
    x = x.astype(np.float32)
    return Dataset(x[n_test:], labels[n_test:], x[:n_test], labels[:n_test])


def batches(n: int, batch_size: int, stream: RandomStream | None = None):
    """Index arrays of consecutive mini-batches (shuffled when a stream is given)."""
    order = stream.permutation(n) if stream is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]
