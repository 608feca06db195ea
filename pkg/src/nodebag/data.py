"""MNIST (IDX) and CIFAR-10 (binary batch) readers, splitting and batching."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class RecordSizeError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = ""
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, split=None) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.name, split or self.split)


# ---------------------------------------------------------------------------
# IDX

def _read_idx(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is too short for an IDX header")
    found, count = struct.unpack(">ii", raw[:8])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found}, expected {magic}")
    ndims = found & 0xFF
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndims}i", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - header} bytes, "
                                 f"header promises {expected}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-d images or 1-d labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[array.ndim]
    header = struct.pack(f">i{array.ndim}i", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_mnist_idx(images_path, labels_path, split="") -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} has {len(images)} images but "
                                 f"{labels_path} has {len(labels)} labels")
    pixels = (images[:, None].astype(T.get_dtype()) / 255).astype(T.get_dtype())
    return Dataset(pixels, labels.astype(np.int64), "mnist", split)


def _find(data_dir: Path, name: str) -> Path:
    # official names use '-idx3-'; some mirrors use '.idx3-'
    for candidate in (name, name.replace("-idx", ".idx")):
        if (data_dir / candidate).exists():
            return data_dir / candidate
    raise FileNotFoundError(f"{name} not found in {data_dir}")


def load_mnist_dir(data_dir, split="train") -> Dataset:
    data_dir = Path(data_dir)
    img, lab = MNIST_FILES[split]
    return load_mnist_idx(_find(data_dir, img), _find(data_dir, lab), split)


# ---------------------------------------------------------------------------
# CIFAR-10

def load_cifar10_binary(paths, split="") -> Dataset:
    """Records of one label byte and 3072 pixel bytes (R, G, B planes of 32x32)."""
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise RecordSizeError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        if not raw:
            log.warning("%s is empty", path)
            continue
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records[:, 0].max() > 9:
            raise LabelRangeError(f"{path}: label byte {records[:, 0].max()} > 9")
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    dtype = T.get_dtype()
    if not images:
        return Dataset(np.zeros((0, 3, 32, 32), dtype=dtype), np.zeros(0, dtype=np.int64),
                       "cifar10", split)
    pixels = (np.concatenate(images).astype(dtype) / 255).astype(dtype)
    return Dataset(pixels, np.concatenate(labels), "cifar10", split)


def load_cifar10_dir(data_dir, split="train") -> Dataset:
    data_dir = Path(data_dir)
    names = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    paths = [data_dir / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files: {', '.join(missing)}")
    return load_cifar10_binary(paths, split)


# ---------------------------------------------------------------------------
# splitting and batching

def split_train_val(dataset: Dataset, val_fraction=0.1, seed=0):
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int = 128
    epoch: int = 0

    def permutation(self, n: int) -> np.ndarray:
        return np.random.default_rng([self.seed, self.epoch]).permutation(n)


def batches(dataset: Dataset, plan: BatchPlan):
    """Yield (images, labels) in a fresh seeded order per epoch; last batch may be short."""
    if plan.batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {plan.batch_size}")
    order = plan.permutation(len(dataset))
    for start in range(0, len(order), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield dataset.images[idx], dataset.labels[idx]
