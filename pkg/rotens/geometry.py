"""
Geometric transforms on NCHW tensors.

Quarter turns are exact index permutations and are what the network uses.
Continuous rotation/scaling with bilinear sampling exists only to generate
rotated datasets. Positive angles turn counter-clockwise about the image
centre ((H-1)/2, (W-1)/2).
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from .errors import ShapeError
from .tensor import Op, Tensor, apply_op

# Sample coordinates this close to a grid point are snapped onto it, so that
# warps at quarter-turn angles reproduce the exact permutation.
SNAP_TOLERANCE = 1e-9


class QuarterTurn(Enum):
    R0 = 0
    R90 = 90
    R180 = 180
    R270 = 270

    @property
    def turns(self) -> int:
        return self.value // 90

    def compose(self, other: "QuarterTurn") -> "QuarterTurn":
        return QuarterTurn((self.value + other.value) % 360)

    def inverse(self) -> "QuarterTurn":
        return QuarterTurn((360 - self.value) % 360)

    @classmethod
    def parse(cls, value: Union[str, int]) -> "QuarterTurn":
        try:
            return cls(int(value) % 360)
        except ValueError:
            raise ValueError(f"Invalid quarter turn {value!r}: must be one of 0, 90, 180, 270")


C4 = (QuarterTurn.R0, QuarterTurn.R90, QuarterTurn.R180, QuarterTurn.R270)


@dataclass(frozen=True)
class ContinuousTransform:
    angle_deg: float
    scale: float = 1.0
    fill: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.angle_deg):
            raise ValueError(f"Invalid rotation angle: {self.angle_deg}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"Scale must be a positive finite number, got {self.scale}")
        object.__setattr__(self, "angle_deg", float(self.angle_deg) % 360.0)


def _require_square(shape: tuple, what: str) -> None:
    if len(shape) != 4 or shape[2] != shape[3]:
        raise ShapeError(f"{what} needs square NCHW maps, got shape {shape}")


def rot90_array(array: np.ndarray, t: QuarterTurn) -> np.ndarray:
    """out[n, c, h, w] = in[n, c, w, H-1-h] for one counter-clockwise quarter turn."""
    _require_square(array.shape, "rot90")
    if t is QuarterTurn.R0:
        return array.copy()
    return np.ascontiguousarray(np.rot90(array, k=t.turns, axes=(2, 3)))


def rot90(x: Tensor, t: QuarterTurn) -> Tensor:
    return apply_op(
        Op.ROT90,
        (x,),
        rot90_array(x.data, t),
        lambda grad, saved: (rot90_array(grad, saved["inverse"]),),
        inverse=t.inverse(),
    )


def reverse(z: Tensor, t: QuarterTurn) -> Tensor:
    """Undo the input transform t on a feature map: rot90 by t's inverse."""
    if z.ndim != 4 or z.shape[2] != z.shape[3]:
        raise ShapeError(f"Cannot reverse-rotate a non-square feature map of shape {z.shape}")
    return rot90(z, t.inverse())


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < SNAP_TOLERANCE, nearest, coords)


def warp_array(images: np.ndarray, t: ContinuousTransform) -> np.ndarray:
    """
    Rotate by t.angle_deg, then scale by t.scale, about the image centre.

    Each output pixel samples the input at the inverse-mapped point with
    bilinear interpolation; taps outside the image read t.fill.
    """
    _require_square(images.shape, "warp")
    side = images.shape[2]
    centre = (side - 1) / 2.0
    theta = math.radians(t.angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    rows, cols = np.meshgrid(
        np.arange(side) - centre, np.arange(side) - centre, indexing="ij"
    )
    src_rows = _snap((cos * rows + sin * cols) / t.scale + centre)
    src_cols = _snap((-sin * rows + cos * cols) / t.scale + centre)

    top = np.floor(src_rows).astype(np.int64)
    left = np.floor(src_cols).astype(np.int64)
    down = src_rows - top
    right = src_cols - left

    out = np.zeros(images.shape)
    for d_row, d_col, weight in (
        (0, 0, (1 - down) * (1 - right)),
        (0, 1, (1 - down) * right),
        (1, 0, down * (1 - right)),
        (1, 1, down * right),
    ):
        tap_rows, tap_cols = top + d_row, left + d_col
        inside = (tap_rows >= 0) & (tap_rows < side) & (tap_cols >= 0) & (tap_cols < side)
        taps = images[:, :, np.clip(tap_rows, 0, side - 1), np.clip(tap_cols, 0, side - 1)]
        out += weight * np.where(inside, taps, t.fill)
    return out


def warp(x: Tensor, t: ContinuousTransform) -> Tensor:
    return Tensor(warp_array(x.data, t), copy=False)
