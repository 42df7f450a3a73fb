from pathlib import Path

import numpy as np
import pytest

from rotens.datasets import write_idx
from rotens.model import build_default
from rotens.tensor import clear_tape


@pytest.fixture(autouse=True)
def fresh_tape():
    clear_tape()
    yield
    clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_default(classes=3, input_shape=(1, 8, 8), seed=7, widths=(2, 2, 3, 3))


def write_mnist_like(directory: Path, train: int = 40, test: int = 20, side: int = 8, classes: int = 3, seed: int = 0) -> Path:
    """Random u8 images under the canonical MNIST file names."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for prefix, count in (("train", train), ("t10k", test)):
        labels = rng.integers(0, classes, size=count)
        images = rng.integers(0, 256, size=(count, side, side))
        # A bright quadrant per class so there is something to learn
        for n, label in enumerate(labels):
            images[n, : side // 2, : side // 2] = np.clip(images[n, : side // 2, : side // 2], 60 * label, 255)
        write_idx(
            directory / f"{prefix}-images-idx3-ubyte",
            directory / f"{prefix}-labels-idx1-ubyte",
            images,
            labels,
        )
    return directory


@pytest.fixture
def mnist_dir(tmp_path):
    return write_mnist_like(tmp_path / "data")
