from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataError


class Split(Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class DatasetMeta:
    source: str
    regime: str = "none"
    seed: Optional[int] = None
    mean: float = 0.0
    std: float = 1.0
    # Per-image parameters drawn by the generator, empty for untransformed data
    angles: tuple[float, ...] = ()
    scales: tuple[float, ...] = ()


@dataclass
class Dataset:
    """
    images is (count, channels, side, side) float64, labels is int64 of length
    count. Raw readers return pixels in [0, 1] with meta.mean == 0 and
    meta.std == 1; standardize() records the constants it applied.
    """

    images: np.ndarray
    labels: np.ndarray
    meta: DatasetMeta = field(default_factory=lambda: DatasetMeta(source="memory"))

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"{self.meta.source}: images must be (count, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{self.meta.source}: {len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and self.labels.min() < 0:
            raise DataError(f"{self.meta.source}: negative label {self.labels.min()}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, count: Optional[int]) -> "Dataset":
        """The first count items (all of them when count is None)."""
        if count is None or count >= len(self):
            return self
        meta = replace(
            self.meta,
            angles=self.meta.angles[:count],
            scales=self.meta.scales[:count],
        )
        return Dataset(self.images[:count], self.labels[:count], meta)

    def standardize(self, mean: float, std: float) -> "Dataset":
        if std <= 0:
            raise DataError(f"Standardization std must be positive, got {std}")
        if self.meta.mean != 0.0 or self.meta.std != 1.0:
            raise DataError(f"{self.meta.source} is already standardized")
        return Dataset(
            (self.images - mean) / std, self.labels, replace(self.meta, mean=mean, std=std)
        )

    def destandardize(self) -> "Dataset":
        return Dataset(
            self.images * self.meta.std + self.meta.mean,
            self.labels,
            replace(self.meta, mean=0.0, std=1.0),
        )


class DatasetSource(ABC):
    """A named on-disk dataset layout that can be found under a data directory."""

    @classmethod
    @abstractmethod
    def source_name(cls) -> str:
        raise NotImplementedError

    @classmethod
    @abstractmethod
    def is_present(cls, data_dir: Path) -> bool:
        """Return true if this source's files exist under data_dir"""
        raise NotImplementedError

    @abstractmethod
    def load(self, data_dir: Path, split: Split) -> Dataset:
        raise NotImplementedError
