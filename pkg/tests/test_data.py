import logging
import struct

import numpy as np
import pytest

from nodebag import data
from nodebag.data import BatchPlan, Dataset


def write_cifar(path, labels, pixels):
    with open(path, "wb") as f:
        for lab, px in zip(labels, pixels):
            f.write(bytes([lab]) + px.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# IDX

def test_idx_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, (2, 28, 28), dtype=np.uint8)
    labels = np.array([3, 9], dtype=np.uint8)
    data.write_idx(tmp_path / "img", images)
    data.write_idx(tmp_path / "lab", labels)
    assert np.array_equal(data.read_idx_images(tmp_path / "img"), images)
    ds = data.load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.images.shape == (2, 1, 28, 28) and ds.images.dtype == np.float32
    assert np.array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), images)
    assert list(ds.labels) == [3, 9]


def test_idx_header_layout(tmp_path):
    data.write_idx(tmp_path / "lab", np.array([1, 2, 3], dtype=np.uint8))
    raw = (tmp_path / "lab").read_bytes()
    assert struct.unpack(">ii", raw[:8]) == (2049, 3) and raw[8:] == b"\x01\x02\x03"


def test_idx_wrong_magic(tmp_path):
    data.write_idx(tmp_path / "lab", np.array([1, 2], dtype=np.uint8))
    with pytest.raises(data.BadMagicError):
        data.read_idx_images(tmp_path / "lab")


def test_idx_truncated(tmp_path, rng):
    data.write_idx(tmp_path / "img", rng.integers(0, 256, (2, 4, 4), dtype=np.uint8))
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "cut").write_bytes(raw[:-5])
    with pytest.raises(data.TruncatedFileError):
        data.read_idx_images(tmp_path / "cut")
    (tmp_path / "tiny").write_bytes(raw[:6])
    with pytest.raises(data.TruncatedFileError):
        data.read_idx_images(tmp_path / "tiny")


def test_idx_count_mismatch(tmp_path, rng):
    data.write_idx(tmp_path / "img", rng.integers(0, 256, (3, 4, 4), dtype=np.uint8))
    data.write_idx(tmp_path / "lab", np.array([1, 2], dtype=np.uint8))
    with pytest.raises(data.CountMismatchError):
        data.load_mnist_idx(tmp_path / "img", tmp_path / "lab")


def test_official_mnist_counts(mnist_dir):
    train = data.load_mnist_dir(mnist_dir, "train")
    test = data.load_mnist_dir(mnist_dir, "test")
    assert len(train) == 60000 and train.images.shape[1:] == (1, 28, 28)
    assert len(test) == 10000
    assert train.images.min() >= 0 and train.images.max() <= 1
    assert set(np.unique(train.labels)) == set(range(10))


# ---------------------------------------------------------------------------
# CIFAR-10

def test_cifar_round_trip(tmp_path):
    ramp = np.arange(3072) % 256
    write_cifar(tmp_path / "b.bin", [7], [ramp])
    ds = data.load_cifar10_binary([tmp_path / "b.bin"])
    assert len(ds) == 1 and ds.labels[0] == 7 and ds.images.shape == (1, 3, 32, 32)
    assert np.array_equal(np.rint(ds.images[0] * 255).astype(int).ravel(), ramp)
    # channel-major planes: first 1024 bytes are the red plane
    assert np.array_equal(np.rint(ds.images[0, 1] * 255).astype(int).ravel(), ramp[1024:2048])


def test_cifar_bad_size(tmp_path):
    (tmp_path / "b.bin").write_bytes(b"\x00" * 3000)
    with pytest.raises(data.RecordSizeError):
        data.load_cifar10_binary([tmp_path / "b.bin"])


def test_cifar_bad_label(tmp_path):
    write_cifar(tmp_path / "b.bin", [10], [np.zeros(3072)])
    with pytest.raises(data.LabelRangeError):
        data.load_cifar10_binary([tmp_path / "b.bin"])


def test_cifar_empty_file_warns(tmp_path, caplog):
    (tmp_path / "b.bin").write_bytes(b"")
    with caplog.at_level(logging.WARNING):
        ds = data.load_cifar10_binary([tmp_path / "b.bin"])
    assert len(ds) == 0 and ds.images.shape == (0, 3, 32, 32)
    assert "empty" in caplog.text


def test_cifar_file_order(tmp_path):
    write_cifar(tmp_path / "a.bin", [1, 2], [np.zeros(3072), np.ones(3072)])
    write_cifar(tmp_path / "b.bin", [3], [np.full(3072, 2)])
    ds = data.load_cifar10_binary([tmp_path / "a.bin", tmp_path / "b.bin"])
    again = data.load_cifar10_binary([tmp_path / "a.bin", tmp_path / "b.bin"])
    assert list(ds.labels) == [1, 2, 3] and np.array_equal(ds.images, again.images)


def test_cifar_dir_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_cifar10_dir(tmp_path)


# ---------------------------------------------------------------------------
# split and batches

def _toy(n):
    return Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n) % 10)


def test_split_sizes_and_partition():
    ds = _toy(50000)
    train, val = data.split_train_val(ds, 0.1, seed=3)
    assert (len(train), len(val)) == (45000, 5000)
    ids = np.concatenate([train.images.ravel(), val.images.ravel()]).astype(int)
    assert np.array_equal(np.sort(ids), np.arange(50000))


def test_split_determinism():
    ds = _toy(1000)
    a, _ = data.split_train_val(ds, 0.2, seed=1)
    b, _ = data.split_train_val(ds, 0.2, seed=1)
    c, _ = data.split_train_val(ds, 0.2, seed=2)
    assert np.array_equal(a.images, b.images) and not np.array_equal(a.images, c.images)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        data.split_train_val(_toy(10), 1.0)


def test_batch_sizes():
    sizes = [len(y) for _, y in data.batches(_toy(10), BatchPlan(0, 4))]
    assert sizes == [4, 4, 2]


def test_batches_form_permutation():
    got = np.concatenate([x.ravel() for x, _ in data.batches(_toy(37), BatchPlan(5, 8, epoch=2))])
    assert np.array_equal(np.sort(got), np.arange(37))


def test_batch_order_determinism():
    order = lambda seed, epoch: np.concatenate(
        [x.ravel() for x, _ in data.batches(_toy(30), BatchPlan(seed, 7, epoch))])
    assert np.array_equal(order(1, 3), order(1, 3))
    assert not np.array_equal(order(1, 3), order(1, 4))


def test_dataset_count_mismatch():
    with pytest.raises(data.CountMismatchError):
        Dataset(np.zeros((3, 1, 1, 1)), np.zeros(2))
