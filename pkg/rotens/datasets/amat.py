"""
The mnist-rot text format: one image per row as 785 whitespace-separated
floats, 784 pixels in [0, 1] (row-major 28x28) followed by the label.
"""

from logging import getLogger
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import DataError
from .base import Dataset, DatasetMeta, DatasetSource, Split

logger = getLogger(__name__)

SIDE = 28
ROW_LENGTH = SIDE * SIDE + 1

SPLIT_FILES = {
    Split.TRAIN: "mnist_all_rotation_normalized_float_train_valid.amat",
    Split.TEST: "mnist_all_rotation_normalized_float_test.amat",
}


def read_amat(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"amat file not found: {path}")
    pixels, labels = [], []
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != ROW_LENGTH:
                raise DataError(
                    f"{path}:{line_number}: expected {ROW_LENGTH} values, got {len(tokens)}"
                )
            try:
                values = [float(token) for token in tokens]
            except ValueError as e:
                raise DataError(f"{path}:{line_number}: non-numeric token ({e})")
            pixels.append(values[:-1])
            labels.append(int(values[-1]))
    logger.info("Read %d rows from %s", len(labels), path)
    images = np.array(pixels, dtype=np.float64).reshape(len(labels), 1, SIDE, SIDE)
    return Dataset(images, np.array(labels, dtype=np.int64), DatasetMeta(source=path.name))


class MnistRotSource(DatasetSource):
    @classmethod
    def source_name(cls) -> str:
        return "mnist-rot"

    @classmethod
    def _path(cls, data_dir: Path, split: Split) -> Path:
        for folder in (data_dir, data_dir / "mnist-rot"):
            if (folder / SPLIT_FILES[split]).is_file():
                return folder / SPLIT_FILES[split]
        return data_dir / SPLIT_FILES[split]

    @classmethod
    def is_present(cls, data_dir: Path) -> bool:
        return all(cls._path(data_dir, split).is_file() for split in Split)

    def load(self, data_dir: Path, split: Split) -> Dataset:
        return read_amat(self._path(data_dir, split))
