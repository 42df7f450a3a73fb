"""Feature-map ensembles over reverse-aligned branches, and score-level TTA combiners."""

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .geometry import QuarterTurn
from .nn_ops import softmax
from .tensor import Op, Tensor, apply_op, note_decision


class CombineMode(Enum):
    MEAN = "mean"
    MAX = "max"


@dataclass
class BranchSet:
    """Reverse-transformed feature maps, branch n belonging to transforms[n]."""

    branches: list[Tensor]
    transforms: tuple[QuarterTurn, ...] = ()

    def __post_init__(self):
        if not self.branches:
            raise ShapeError("A branch set needs at least one branch")
        shape = self.branches[0].shape
        for n, branch in enumerate(self.branches):
            if branch.shape != shape:
                raise ShapeError(f"Branch {n} has shape {branch.shape}, expected {shape}")
        if self.transforms and len(self.transforms) != len(self.branches):
            raise ShapeError(
                f"{len(self.branches)} branches but {len(self.transforms)} transforms"
            )

    def __len__(self) -> int:
        return len(self.branches)

    def __getitem__(self, n: int) -> Tensor:
        return self.branches[n]

    def permuted(self, order: Sequence[int]) -> "BranchSet":
        return BranchSet(
            [self.branches[n] for n in order],
            tuple(self.transforms[n] for n in order) if self.transforms else (),
        )


@dataclass
class ScoreSet:
    scores: list[np.ndarray]  # each (batch, classes)

    def __post_init__(self):
        if not self.scores:
            raise ShapeError("A score set needs at least one entry")
        shape = self.scores[0].shape
        for n, scores in enumerate(self.scores):
            if scores.ndim != 2 or scores.shape != shape:
                raise ShapeError(f"Scores {n} have shape {scores.shape}, expected {shape}")


def feature_max(Z: BranchSet) -> Tensor:
    """Elementwise max over branches; the gradient goes to the lowest-index winner."""
    stacked = np.stack([z.data for z in Z.branches])
    winner = stacked.argmax(axis=0)
    note_decision(winner)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]
    return apply_op(
        Op.FEATURE_MAX,
        Z.branches,
        out,
        lambda grad, saved: tuple(
            np.where(saved["winner"] == n, grad, 0.0) for n in range(saved["count"])
        ),
        winner=winner,
        count=len(Z),
    )


def feature_mean(Z: BranchSet) -> Tensor:
    """Elementwise mean, accumulated in ascending branch order then divided by N."""
    count = len(Z)
    total = Z.branches[0].data.copy()
    for z in Z.branches[1:]:
        total += z.data
    return apply_op(
        Op.FEATURE_MEAN,
        Z.branches,
        total / count,
        lambda grad, saved: (grad / count,) * count,
    )


def score_combine(S: ScoreSet, mode: CombineMode) -> np.ndarray:
    """Softmax each entry, then take the elementwise mean or max across entries."""
    probabilities = [softmax(scores) for scores in S.scores]
    if mode is CombineMode.MAX:
        return np.maximum.reduce(probabilities)
    total = probabilities[0].copy()
    for p in probabilities[1:]:
        total += p
    return total / len(probabilities)
