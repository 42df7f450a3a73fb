"""MNIST's big-endian IDX container: u8 images (magic 0x803) and labels (0x801)."""

import gzip
import struct
from logging import getLogger
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..errors import DataError
from .base import Dataset, DatasetMeta, DatasetSource, Split

logger = getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SPLIT_FILES = {
    Split.TRAIN: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    Split.TEST: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_bytes(path: Path) -> bytes:
    if not path.is_file():
        raise DataError(f"IDX file not found: {path}")
    if path.suffix == ".gz":
        try:
            return gzip.decompress(path.read_bytes())
        except (OSError, EOFError) as e:
            raise DataError(f"{path}: corrupt gzip stream: {e}")
    return path.read_bytes()


def _parse(path: Path, payload: bytes, magic: int, ndims: int) -> np.ndarray:
    header_size = 4 + 4 * ndims
    if len(payload) < 4:
        raise DataError(f"{path}: truncated IDX file at byte offset {len(payload)}")
    (found,) = struct.unpack_from(">I", payload, 0)
    if found != magic:
        raise DataError(f"{path}: bad IDX magic 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    if len(payload) < header_size:
        raise DataError(f"{path}: truncated IDX header at byte offset {len(payload)}")
    dims = struct.unpack_from(f">{ndims}I", payload, 4)
    expected = header_size + int(np.prod(dims, dtype=np.int64))
    if len(payload) < expected:
        raise DataError(
            f"{path}: truncated IDX payload at byte offset {len(payload)}, expected {expected} bytes"
        )
    return np.frombuffer(payload, dtype=np.uint8, count=expected - header_size, offset=header_size).reshape(dims)


def read_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Dataset:
    """Pixels come back scaled to [0, 1] as (count, 1, rows, cols)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _parse(images_path, _read_bytes(images_path), IMAGES_MAGIC, 3)
    labels = _parse(labels_path, _read_bytes(labels_path), LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    logger.info("Read %d images of %dx%d from %s", len(images), images.shape[1], images.shape[2], images_path)
    return Dataset(
        images[:, None, :, :].astype(np.float64) / 255.0,
        labels.astype(np.int64),
        DatasetMeta(source=images_path.name),
    )


def write_idx(images_path: Union[str, Path], labels_path: Union[str, Path], images: np.ndarray, labels: np.ndarray) -> None:
    """Write u8 images (count, rows, cols) and labels (count,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">4I", IMAGES_MAGIC, *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(struct.pack(">2I", LABELS_MAGIC, len(labels)) + labels.tobytes())


class MnistIdxSource(DatasetSource):
    """The canonical MNIST file names, optionally gzipped, in data_dir or data_dir/mnist."""

    @classmethod
    def source_name(cls) -> str:
        return "mnist"

    @staticmethod
    def _find(data_dir: Path, name: str) -> Optional[Path]:
        for folder in (data_dir, data_dir / "mnist"):
            for candidate in (folder / name, folder / f"{name}.gz"):
                if candidate.is_file():
                    return candidate
        return None

    @classmethod
    def is_present(cls, data_dir: Path) -> bool:
        return all(
            cls._find(data_dir, name) is not None
            for names in SPLIT_FILES.values()
            for name in names
        )

    def load(self, data_dir: Path, split: Split) -> Dataset:
        paths = [self._find(data_dir, name) for name in SPLIT_FILES[split]]
        if None in paths:
            raise DataError(
                f"MNIST {split.value} files not found in {data_dir}: expected "
                f"{' and '.join(SPLIT_FILES[split])} (optionally .gz)"
            )
        return read_idx(*paths)
