import os
from pathlib import Path

import numpy as np
import pytest

from nodebag import tensor as T

_MNIST_CANDIDATES = [
    os.environ.get("NODEBAG_MNIST_DIR", ""),
    str(Path(__file__).resolve().parents[1] / "data" / "mnist"),
    "/root/data/mnist",
]


def find_mnist_dir():
    for cand in _MNIST_CANDIDATES:
        if cand and (Path(cand) / "t10k-labels.idx1-ubyte").exists() or \
                cand and (Path(cand) / "t10k-labels-idx1-ubyte").exists():
            return cand
    return None


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    path = find_mnist_dir()
    if path is None:
        pytest.skip("MNIST IDX files not found; set NODEBAG_MNIST_DIR")
    return path
