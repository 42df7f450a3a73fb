"""SGD with momentum and L2 weight decay, learning-rate schedules, and the fit/evaluate loop."""

import json
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from logging import getLogger
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .datasets import Dataset, batches, prefetch, sequential_batches
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .model import InferenceMode, Mode, ModelGraph, forward, predict
from .nn_ops import softmax_cross_entropy
from .tensor import Tensor, backward, clear_tape

logger = getLogger(__name__)

EVAL_BATCH_SIZE = 256
STEP_MILESTONES = (0.5, 0.75, 0.9)


class Schedule(Enum):
    STEP = "step"
    COSINE = "cosine"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr_start: float = 0.1
    lr_end: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    mode: InferenceMode = InferenceMode(Mode.PLAIN)
    schedule: Schedule = Schedule.STEP

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if not (self.lr_start >= self.lr_end > 0):
            raise ConfigError(f"Need lr_start >= lr_end > 0, got {self.lr_start} and {self.lr_end}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.mode.is_tta:
            raise ConfigError(f"{self.mode.name} is an evaluation-only mode and cannot be trained")

    def learning_rate(self, epoch: int) -> float:
        """
        step: lr_start multiplied by (lr_end / lr_start) ** (1/3) at 50%, 75%
        and 90% of the epochs, reaching lr_end for the last stretch.
        cosine: half-cosine from lr_start at the first epoch to lr_end at the last.
        """
        if self.schedule is Schedule.STEP:
            passed = sum(epoch >= max(1, math.floor(p * self.epochs)) for p in STEP_MILESTONES)
            if passed == len(STEP_MILESTONES):
                return self.lr_end
            return self.lr_start * (self.lr_end / self.lr_start) ** (passed / len(STEP_MILESTONES))
        if self.epochs <= 1:
            return self.lr_start
        progress = epoch / (self.epochs - 1)
        return self.lr_end + (self.lr_start - self.lr_end) * (1 + math.cos(math.pi * progress)) / 2

    def describe(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "mode": self.mode.name,
            "transforms": [t.value for t in self.mode.transforms],
            "schedule": self.schedule.value,
        }


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, Optional[np.ndarray]],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """v <- momentum * v + grad + weight_decay * param; param <- param - lr * v."""
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros(param.shape)
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient of {name} has shape {grad.shape}, expected {param.shape}")
        velocity = state.get(name)
        if velocity is None:
            velocity = np.zeros(param.shape)
        velocity = momentum * velocity + grad + weight_decay * param.data
        state[name] = velocity
        param.data -= lr * velocity


class SGD:
    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        grads = {name: param.grad for name, param in self.params.items()}
        sgd_step(self.params, grads, self.state, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    test_accuracy: dict[str, float]


@dataclass
class RunRecord:
    config: dict
    initial_accuracy: dict[str, float]
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Optional[str] = None

    @property
    def final_accuracy(self) -> dict[str, float]:
        return self.epochs[-1].test_accuracy if self.epochs else self.initial_accuracy

    def summary(self) -> dict:
        """Everything except wall-clock time, so reruns serialize identically."""
        return {
            "config": self.config,
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "epochs_completed": len(self.epochs),
            "checkpoint": self.checkpoint,
        }

    def write(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "epochs.jsonl", "w") as f:
            for record in self.epochs:
                f.write(json.dumps(asdict(record), sort_keys=True) + "\n")
        (directory / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        with open(directory / "timing.log", "a") as f:
            f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} wall_time={self.wall_time:.3f}s\n")


def evaluate(
    model: ModelGraph, d: Dataset, mode: InferenceMode, batch_size: int = EVAL_BATCH_SIZE
) -> float:
    """Fraction of argmax-correct predictions; argmax ties go to the lowest class index."""
    if len(d) == 0:
        raise DataError(f"Cannot evaluate on the empty dataset {d.meta.source}")
    correct = 0
    for x, labels in sequential_batches(d, batch_size):
        correct += int((predict(model, x, mode).argmax(axis=1) == labels).sum())
    return correct / len(d)


def fit(
    model: ModelGraph,
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig,
    eval_modes: Optional[Sequence[InferenceMode]] = None,
    resample: Optional[Callable[[int], Dataset]] = None,
) -> RunRecord:
    """
    Train model through cfg.mode's forward path and record per-epoch test
    accuracy for every mode in eval_modes (default: cfg.mode alone).
    resample(epoch), when given, supplies that epoch's training set.
    """
    for d in (train_set, test_set):
        if d.input_shape != model.input_shape:
            raise ShapeError(f"{d.meta.source} has images of shape {d.input_shape}, model expects {model.input_shape}")
    eval_modes = list(eval_modes) if eval_modes else [cfg.mode]

    started = time.monotonic()
    record = RunRecord(
        config={**cfg.describe(), "model_warnings": list(model.warnings)},
        initial_accuracy={m.name: evaluate(model, test_set, m) for m in eval_modes},
    )
    logger.info("Initial accuracy %s", record.initial_accuracy)

    optimizer = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        data = resample(epoch) if resample is not None else train_set
        total_loss, correct = 0.0, 0
        for x, labels in prefetch(batches(data, cfg.batch_size, cfg.seed, epoch)):
            clear_tape()
            optimizer.zero_grad()
            logits = forward(model, x, cfg.mode)
            loss = softmax_cross_entropy(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                clear_tape()
                record.wall_time = time.monotonic() - started
                raise DivergenceError(
                    f"Non-finite loss {value} in epoch {epoch + 1} at lr {lr}", record
                )
            backward(loss)
            optimizer.step(lr)
            total_loss += value * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())

        count = max(len(data), 1)
        epoch_record = EpochRecord(
            epoch=epoch + 1,
            lr=lr,
            train_loss=total_loss / count,
            train_accuracy=correct / count,
            test_accuracy={m.name: evaluate(model, test_set, m) for m in eval_modes},
        )
        record.epochs.append(epoch_record)
        logger.info(
            "Epoch %d/%d lr=%.5f loss=%.4f train_acc=%.4f test_acc=%s",
            epoch + 1, cfg.epochs, lr, epoch_record.train_loss,
            epoch_record.train_accuracy, epoch_record.test_accuracy,
        )

    record.wall_time = time.monotonic() - started
    return record
