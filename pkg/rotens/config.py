"""
Experiment configuration: a UTF-8 file of `key = value` lines with `#`
comments. List values are comma separated. Unknown keys are rejected.
"""

import hashlib
import os
from dataclasses import dataclass, fields, replace
from logging import getLogger
from pathlib import Path
from typing import Callable, Optional, Union

from platformdirs import user_config_dir, user_data_dir

from .datasets import RegimeKind
from .errors import ConfigError
from .geometry import C4, QuarterTurn
from .model import ARCHITECTURES, DEFAULT_WIDTHS, SMALL_CNN_HEAD_START
from .train import Schedule, TrainConfig

logger = getLogger(__name__)

APP_NAME = "rotens"
DATA_DIR_ENV = "ROTENS_DATA_DIR"
DIGEST_LENGTH = 12

# The comparison grid: baseline and augmented models with and without TTA, then the ensembles
CELLS = ("bs", "bs_max", "bs_mean", "da", "da_max", "da_mean", "ours_max", "ours_mean")
CELL_ALIASES = {"plain": "da", "tta_max": "da_max", "tta_mean": "da_mean"}


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true or false, got {value!r}")


def _parse_optional_int(value: str) -> Optional[int]:
    return None if value.lower() in ("", "none", "all") else int(value)


def _parse_optional_path(value: str) -> Optional[Path]:
    return None if value.lower() in ("", "none") else Path(value).expanduser()


def _split_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _parse_cell(value: str) -> str:
    cell = CELL_ALIASES.get(value, value)
    if cell not in CELLS:
        raise ValueError(
            f"unknown mode {value!r}; must be one of {', '.join(CELLS + tuple(CELL_ALIASES))}"
        )
    return cell


def _parse_architecture(value: str) -> str:
    if value not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {value!r}; must be one of {', '.join(ARCHITECTURES)}")
    return value


def _unique(items: list) -> tuple:
    return tuple(dict.fromkeys(items))


PARSERS: dict[str, Callable[[str], object]] = {
    "dataset": str,
    "data_dir": _parse_optional_path,
    "generated_dir": _parse_optional_path,
    "train_subset": _parse_optional_int,
    "test_subset": _parse_optional_int,
    "regimes": lambda v: _unique([RegimeKind.parse(r) for r in _split_list(v)]),
    "generate_seed": int,
    "resample_each_epoch": _parse_bool,
    "norm_mean": float,
    "norm_std": float,
    "classes": int,
    "arch": _parse_architecture,
    "widths": lambda v: tuple(int(w) for w in _split_list(v)),
    "split_index": _parse_optional_int,
    "transforms": lambda v: _unique([QuarterTurn.parse(t) for t in _split_list(v)]),
    "modes": lambda v: _unique([_parse_cell(m) for m in _split_list(v)]),
    "finetune_from_bs": _parse_bool,
    "epochs": int,
    "batch_size": int,
    "lr_start": float,
    "lr_end": float,
    "momentum": float,
    "weight_decay": float,
    "schedule": Schedule,
    "seeds": lambda v: _unique([int(s) for s in _split_list(v)]),
    "jobs": int,
    "output_dir": lambda v: Path(v).expanduser(),
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: Optional[Path] = None
    generated_dir: Optional[Path] = None  # default: <output_dir>/generated
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    regimes: tuple[RegimeKind, ...] = (RegimeKind.A,)
    generate_seed: int = 0
    resample_each_epoch: bool = False
    norm_mean: float = 0.1307
    norm_std: float = 0.3081
    classes: int = 10
    arch: str = "small_cnn"
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    split_index: Optional[int] = None
    transforms: tuple[QuarterTurn, ...] = C4
    modes: tuple[str, ...] = CELLS
    finetune_from_bs: bool = False
    epochs: int = 30
    batch_size: int = 128
    lr_start: float = 0.1
    lr_end: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: Schedule = Schedule.STEP
    seeds: tuple[int, ...] = (0,)
    jobs: int = 1
    output_dir: Path = Path("runs")

    def __post_init__(self):
        if not self.regimes:
            raise ConfigError("regimes must name at least one transform regime")
        if not self.modes:
            raise ConfigError("modes must name at least one grid cell")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if not self.transforms:
            raise ConfigError("transforms must list at least one quarter turn")
        if self.classes < 2:
            raise ConfigError(f"classes must be at least 2, got {self.classes}")
        if self.norm_std <= 0:
            raise ConfigError(f"norm_std must be positive, got {self.norm_std}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {self.jobs}")
        for name in ("train_subset", "test_subset"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if len(self.widths) != len(DEFAULT_WIDTHS) or min(self.widths) < 1:
            raise ConfigError(
                f"widths must be {len(DEFAULT_WIDTHS)} positive conv widths, got {_render_value(self.widths)}"
            )
        if self.split_index is not None and not 0 < self.split_index <= SMALL_CNN_HEAD_START:
            raise ConfigError(
                f"split_index must lie in 1..{SMALL_CNN_HEAD_START} for {self.arch}, got {self.split_index}"
            )
        # Training settings fail here rather than inside a worker thread
        TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            schedule=self.schedule,
        )

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        values = {}
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"{source}:{line_number}: expected 'key = value', got {raw.strip()!r}")
            if key not in PARSERS:
                raise ConfigError(f"{source}:{line_number}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{line_number}: duplicate key {key!r}")
            try:
                values[key] = PARSERS[key](value)
            except ValueError as e:
                raise ConfigError(f"{source}:{line_number}: invalid value for {key}: {e}")
        return cls(**values)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "ExperimentConfig":
        """Read path, or the per-user default file; a missing default file means all defaults."""
        if path is None:
            path = default_config_path()
            if not path.is_file():
                logger.info("No config file at %s, using defaults", path)
                return cls()
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        return cls.parse(path.read_text(encoding="utf-8"), source=str(path))

    def with_overrides(
        self, output_dir: Optional[Path] = None, seed: Optional[int] = None, jobs: Optional[int] = None
    ) -> "ExperimentConfig":
        changes = {}
        if output_dir is not None:
            changes["output_dir"] = Path(output_dir)
        if seed is not None:
            changes["seeds"] = (seed,)
        if jobs is not None:
            changes["jobs"] = jobs
        return replace(self, **changes)

    def narrowed(self, cell: str, regime: RegimeKind, seed: int) -> "ExperimentConfig":
        """The config of a single grid cell; jobs is a scheduling detail and is reset."""
        return replace(self, modes=(cell,), regimes=(regime,), seeds=(seed,), jobs=1)

    def render(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {_render_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()[:DIGEST_LENGTH]

    def resolved_data_dir(self) -> Path:
        if self.data_dir is not None:
            return self.data_dir
        if os.environ.get(DATA_DIR_ENV):
            return Path(os.environ[DATA_DIR_ENV]).expanduser()
        return Path(user_data_dir(APP_NAME))

    def resolved_generated_dir(self) -> Path:
        return self.generated_dir if self.generated_dir is not None else self.output_dir / "generated"


def _render_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render_value(v) for v in value)
    if isinstance(value, (RegimeKind, QuarterTurn, Schedule)):
        return str(value.value)
    return str(value)


def default_config_path() -> Path:
    return Path(user_config_dir(APP_NAME)) / "experiment.conf"
