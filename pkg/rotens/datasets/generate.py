"""
Transformed copies of a dataset, one fresh parameter draw per image:

  A  one of the four quarter turns, applied as an exact index permutation
  B  an angle uniform on [0, 360), applied by bilinear warp
  C  as B plus a magnification uniform on [0.5, 1.5]
"""

from dataclasses import dataclass, replace
from enum import Enum
from logging import getLogger

import numpy as np

from ..errors import DataError
from ..geometry import ContinuousTransform, QuarterTurn, rot90_array, warp_array
from .base import Dataset

logger = getLogger(__name__)

SCALE_RANGE = (0.5, 1.5)


class RegimeKind(Enum):
    NONE = "none"
    A = "A"
    B = "B"
    C = "C"

    @classmethod
    def parse(cls, value: str) -> "RegimeKind":
        for kind in cls:
            if kind.value.lower() == value.strip().lower():
                return kind
        raise ValueError(f"Unknown transform regime {value!r}. Must be one of {', '.join(k.value for k in cls)}")


@dataclass(frozen=True)
class TransformRegime:
    kind: RegimeKind
    seed: int = 0
    fill: float = 0.0

    def for_epoch(self, epoch: int) -> "TransformRegime":
        """The regime reseeded from (seed, epoch), for per-epoch resampling."""
        state = np.random.SeedSequence([self.seed, epoch]).generate_state(1, np.uint64)
        return replace(self, seed=int(state[0]))

    def draw(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-image (angles in degrees, scales) from this regime's seeded generator."""
        rng = np.random.default_rng(self.seed)
        scales = np.ones(count)
        if self.kind is RegimeKind.NONE:
            angles = np.zeros(count)
        elif self.kind is RegimeKind.A:
            angles = rng.integers(0, 4, size=count) * 90.0
        else:
            angles = rng.uniform(0.0, 360.0, size=count)
            if self.kind is RegimeKind.C:
                scales = rng.uniform(*SCALE_RANGE, size=count)
        return angles, scales


def generate_transformed(src: Dataset, regime: TransformRegime) -> Dataset:
    if src.images.shape[2] != src.images.shape[3]:
        raise DataError(f"{src.meta.source}: transformed datasets need square images, got {src.images.shape[2:]}")
    if regime.kind is RegimeKind.NONE:
        return Dataset(
            src.images.copy(),
            src.labels.copy(),
            replace(src.meta, regime=regime.kind.value, seed=regime.seed),
        )
    standardized = src.meta.mean != 0.0 or src.meta.std != 1.0
    raw = src.destandardize() if standardized else src

    angles, scales = regime.draw(len(raw))
    if regime.kind is RegimeKind.A:
        images = np.empty_like(raw.images)
        for turn in QuarterTurn:
            chosen = np.flatnonzero(angles == turn.value)
            if len(chosen):
                images[chosen] = rot90_array(raw.images[chosen], turn)
    else:
        images = np.empty_like(raw.images)
        for n in range(len(raw)):
            transform = ContinuousTransform(float(angles[n]), float(scales[n]), regime.fill)
            images[n] = warp_array(raw.images[n : n + 1], transform)[0]

    logger.info(
        "Generated %d images of %s under regime %s (seed %d)",
        len(raw), src.meta.source, regime.kind.value, regime.seed,
    )
    meta = replace(
        raw.meta,
        regime=regime.kind.value,
        seed=regime.seed,
        angles=tuple(float(a) for a in angles),
        scales=tuple(float(s) for s in scales),
    )
    out = Dataset(images, raw.labels.copy(), meta)
    return out.standardize(src.meta.mean, src.meta.std) if standardized else out
