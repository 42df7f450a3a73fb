from pathlib import Path

from ..errors import DataError
from .amat import MnistRotSource, read_amat
from .base import Dataset, DatasetMeta, DatasetSource, Split
from .batching import batches, prefetch, sequential_batches
from .generate import RegimeKind, TransformRegime, generate_transformed
from .idx import MnistIdxSource, read_idx, write_idx
from .tensor_dir import TensorDirSource, read_tensor_dir, write_tensor_dir

__all__ = [
    "Dataset",
    "DatasetMeta",
    "DatasetSource",
    "RegimeKind",
    "Split",
    "TransformRegime",
    "all_sources",
    "batches",
    "generate_transformed",
    "get_source",
    "load_split",
    "prefetch",
    "read_amat",
    "read_idx",
    "read_tensor_dir",
    "sequential_batches",
    "write_idx",
    "write_tensor_dir",
]

all_sources = [
    MnistIdxSource,
    MnistRotSource,
    TensorDirSource,
]


def get_source(name: str) -> DatasetSource:
    for source in all_sources:
        if source.source_name() == name:
            return source()
    raise DataError(
        f"Unknown dataset {name!r}. Must be one of {', '.join(s.source_name() for s in all_sources)}"
    )


def load_split(name: str, data_dir: Path, split: Split) -> Dataset:
    source = get_source(name)
    if not source.is_present(data_dir):
        raise DataError(f"Dataset {name!r} not found in {data_dir}")
    return source.load(data_dir, split)
