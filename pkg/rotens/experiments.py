"""
The experiment grid behind the generate, train, analyze-c4 and report commands.

Each grid cell pairs a training recipe with an inference mode:

  bs, bs_max, bs_mean        plain model trained on the original data, evaluated
                             without TTA, with TTA max and with TTA mean
  da, da_max, da_mean        the same for a plain model trained on transformed data
  ours_max, ours_mean        trained and evaluated through the feature-map ensemble

Cells that share a recipe share one training job. Every cell gets its own run
directory named <cell>-<regime>-s<seed>-<hash of the cell's config>.
"""

import csv
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from logging import getLogger
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .datasets import (
    Dataset,
    RegimeKind,
    Split,
    TransformRegime,
    generate_transformed,
    load_split,
    read_tensor_dir,
    write_tensor_dir,
)
from .errors import DataError, DivergenceError
from .geometry import C4, rot90_array
from .model import InferenceMode, Mode, ModelGraph, build_default, load_checkpoint, save_checkpoint
from .train import RunRecord, TrainConfig, evaluate, fit

logger = getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
ANALYSIS_NAME = "analysis_c4.csv"
REPORT_NAMES = ("report.txt", "report.json")
BASELINE_JOB = "bs"


@dataclass(frozen=True)
class CellRecipe:
    job: str
    transformed_training: bool
    train_mode: Mode
    eval_mode: Mode


RECIPES = {
    "bs": CellRecipe(BASELINE_JOB, False, Mode.PLAIN, Mode.PLAIN),
    "bs_max": CellRecipe(BASELINE_JOB, False, Mode.PLAIN, Mode.TTA_MAX),
    "bs_mean": CellRecipe(BASELINE_JOB, False, Mode.PLAIN, Mode.TTA_MEAN),
    "da": CellRecipe("da", True, Mode.PLAIN, Mode.PLAIN),
    "da_max": CellRecipe("da", True, Mode.PLAIN, Mode.TTA_MAX),
    "da_mean": CellRecipe("da", True, Mode.PLAIN, Mode.TTA_MEAN),
    "ours_max": CellRecipe("ours_max", True, Mode.OURS_MAX, Mode.OURS_MAX),
    "ours_mean": CellRecipe("ours_mean", True, Mode.OURS_MEAN, Mode.OURS_MEAN),
}


@dataclass
class TrainingJob:
    name: str
    regime: Optional[RegimeKind]  # None for the baseline, which never sees transformed data
    seed: int
    cells: list[tuple[str, RegimeKind]] = field(default_factory=list)

    @property
    def label(self) -> str:
        regime = self.regime.value if self.regime is not None else "original"
        return f"{self.name}-{regime}-s{self.seed}"


def cell_dir(cfg: ExperimentConfig, cell: str, regime: RegimeKind, seed: int) -> Path:
    digest = cfg.narrowed(cell, regime, seed).digest()
    return cfg.output_dir / f"{cell}-{regime.value}-s{seed}-{digest}"


def generated_dir(cfg: ExperimentConfig, regime: RegimeKind) -> Path:
    return cfg.resolved_generated_dir() / f"{cfg.dataset}-{regime.value}"


def generation_seed(generate_seed: int, regime: RegimeKind, split: Split) -> int:
    """Independent seeds for the train and test draws of each regime."""
    sequence = np.random.SeedSequence(
        [generate_seed, list(RegimeKind).index(regime), list(Split).index(split)]
    )
    return int(sequence.generate_state(1, np.uint64)[0])


def _subset_size(cfg: ExperimentConfig, split: Split) -> Optional[int]:
    return cfg.train_subset if split is Split.TRAIN else cfg.test_subset


def load_original(cfg: ExperimentConfig, split: Split) -> Dataset:
    """The untransformed split, unstandardized and cut to the configured subset."""
    return load_split(cfg.dataset, cfg.resolved_data_dir(), split).subset(_subset_size(cfg, split))


def load_generated(cfg: ExperimentConfig, regime: RegimeKind, split: Split) -> Dataset:
    directory = generated_dir(cfg, regime)
    if not (directory / f"{split.value}.rtds").is_file():
        raise DataError(
            f"No generated {split.value} data for regime {regime.value} in {directory}; "
            f"run `rotens generate` with the same config first"
        )
    return read_tensor_dir(directory, split, regime=regime.value).subset(_subset_size(cfg, split))


def cmd_generate(cfg: ExperimentConfig) -> list[Path]:
    written = []
    for split in Split:
        original = load_original(cfg, split)
        for regime in cfg.regimes:
            seed = generation_seed(cfg.generate_seed, regime, split)
            transformed = generate_transformed(original, TransformRegime(regime, seed))
            directory = generated_dir(cfg, regime)
            write_tensor_dir(directory, split, transformed)
            logger.info("Wrote %d %s images for regime %s to %s", len(transformed), split.value, regime.value, directory)
            if directory not in written:
                written.append(directory)
    return written


def plan_jobs(cfg: ExperimentConfig) -> list[TrainingJob]:
    """Training jobs for the grid, baseline jobs first."""
    jobs: dict[tuple, TrainingJob] = {}
    for seed in cfg.seeds:
        if cfg.finetune_from_bs:
            jobs[(BASELINE_JOB, None, seed)] = TrainingJob(BASELINE_JOB, None, seed)
        for regime in cfg.regimes:
            for cell in cfg.modes:
                recipe = RECIPES[cell]
                job_regime = regime if recipe.transformed_training else None
                key = (recipe.job, job_regime, seed)
                if key not in jobs:
                    jobs[key] = TrainingJob(recipe.job, job_regime, seed)
                jobs[key].cells.append((cell, regime))
    return sorted(jobs.values(), key=lambda job: job.name != BASELINE_JOB)


class GridData:
    """Standardized datasets for a grid, loaded once and shared read-only by all jobs."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._cache: dict[tuple, Dataset] = {}
        self._lock = threading.RLock()

    def _get(self, key: tuple, load) -> Dataset:
        with self._lock:
            if key not in self._cache:
                self._cache[key] = load()
            return self._cache[key]

    def raw_original(self, split: Split) -> Dataset:
        return self._get(("raw", split), lambda: load_original(self.cfg, split))

    def original(self, split: Split) -> Dataset:
        return self._get(
            ("original", split),
            lambda: self.raw_original(split).standardize(self.cfg.norm_mean, self.cfg.norm_std),
        )

    def transformed(self, regime: RegimeKind, split: Split) -> Dataset:
        return self._get(
            ("transformed", regime, split),
            lambda: load_generated(self.cfg, regime, split).standardize(self.cfg.norm_mean, self.cfg.norm_std),
        )

    def resampled(self, regime: RegimeKind, epoch: int) -> Dataset:
        base = TransformRegime(regime, generation_seed(self.cfg.generate_seed, regime, Split.TRAIN))
        return generate_transformed(self.raw_original(Split.TRAIN), base.for_epoch(epoch)).standardize(
            self.cfg.norm_mean, self.cfg.norm_std
        )


def _train_config(cfg: ExperimentConfig, job: TrainingJob) -> TrainConfig:
    train_mode = RECIPES[job.cells[0][0]].train_mode if job.cells else Mode.PLAIN
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr_start=cfg.lr_start,
        lr_end=cfg.lr_end,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        seed=job.seed,
        mode=InferenceMode(train_mode, cfg.transforms),
        schedule=cfg.schedule,
    )


def _eval_modes(cfg: ExperimentConfig, job: TrainingJob) -> list[InferenceMode]:
    modes = [InferenceMode(RECIPES[cell].eval_mode, cfg.transforms) for cell, _ in job.cells]
    return list(dict.fromkeys(modes)) or [InferenceMode(Mode.PLAIN, cfg.transforms)]


def _build_model(cfg: ExperimentConfig, input_shape: tuple, seed: int) -> ModelGraph:
    return build_default(
        cfg.arch,
        classes=cfg.classes,
        input_shape=input_shape,
        seed=seed,
        widths=cfg.widths,
        split_index=cfg.split_index,
    )


def _run_job(
    cfg: ExperimentConfig,
    data: GridData,
    job: TrainingJob,
    baselines: dict[int, ModelGraph],
) -> ModelGraph:
    train_cfg = _train_config(cfg, job)
    if job.regime is None:
        train_set, test_set, resample = data.original(Split.TRAIN), data.original(Split.TEST), None
    else:
        train_set, test_set = data.transformed(job.regime, Split.TRAIN), data.transformed(job.regime, Split.TEST)
        resample = (lambda epoch: data.resampled(job.regime, epoch)) if cfg.resample_each_epoch else None

    model = _build_model(cfg, train_set.input_shape, job.seed)
    if cfg.finetune_from_bs and job.name != BASELINE_JOB:
        model.load_state_dict(baselines[job.seed].state_dict())
        logger.info("Job %s fine-tunes the baseline of seed %d", job.label, job.seed)

    logger.info("Training job %s (%d cells, mode %s)", job.label, len(job.cells), train_cfg.mode.name)
    try:
        record = fit(model, train_set, test_set, train_cfg, eval_modes=_eval_modes(cfg, job), resample=resample)
    except DivergenceError as e:
        logger.error("Job %s diverged: %s", job.label, e)
        if e.record is not None:
            for cell, regime in job.cells:
                e.record.write(cell_dir(cfg, cell, regime, job.seed))
        raise
    record.checkpoint = CHECKPOINT_NAME
    for cell, regime in job.cells:
        _write_cell(cfg, data, model, record, cell, regime, job.seed)
    return model


def _write_cell(
    cfg: ExperimentConfig,
    data: GridData,
    model: ModelGraph,
    record: RunRecord,
    cell: str,
    regime: RegimeKind,
    seed: int,
) -> None:
    mode = InferenceMode(RECIPES[cell].eval_mode, cfg.transforms)
    accuracy = evaluate(model, data.transformed(regime, Split.TEST), mode)
    directory = cell_dir(cfg, cell, regime, seed)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(cfg.narrowed(cell, regime, seed).render(), encoding="utf-8")
    save_checkpoint(model, directory / CHECKPOINT_NAME)
    record.write(directory)
    summary = {
        "cell": cell,
        "regime": regime.value,
        "seed": seed,
        "eval_mode": mode.name,
        "transforms": [t.value for t in mode.transforms],
        "accuracy": accuracy,
        "train": record.summary(),
    }
    (directory / "cell.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info("Cell %s on regime %s seed %d: accuracy %.4f (%s)", cell, regime.value, seed, accuracy, directory)


def cmd_train(cfg: ExperimentConfig) -> list[Path]:
    jobs = plan_jobs(cfg)
    data = GridData(cfg)
    for regime in cfg.regimes:
        # Fail before any training when a generated dataset is missing
        data.transformed(regime, Split.TEST)
        if any(job.regime is regime for job in jobs):
            data.transformed(regime, Split.TRAIN)

    baselines: dict[int, ModelGraph] = {}
    with ThreadPoolExecutor(max_workers=cfg.jobs) as executor:
        phases = [
            [job for job in jobs if job.name == BASELINE_JOB],
            [job for job in jobs if job.name != BASELINE_JOB],
        ]
        for phase in phases:
            futures = [executor.submit(_run_job, cfg, data, job, baselines) for job in phase]
            for job, future in zip(phase, futures):
                model = future.result()
                if job.name == BASELINE_JOB:
                    baselines[job.seed] = model
    return [
        cell_dir(cfg, cell, regime, seed)
        for seed in cfg.seeds
        for regime in cfg.regimes
        for cell in cfg.modes
    ]


def _load_cell_model(cfg: ExperimentConfig, cell: str, regime: RegimeKind, seed: int) -> ModelGraph:
    path = cell_dir(cfg, cell, regime, seed) / CHECKPOINT_NAME
    if not path.is_file():
        raise DataError(f"No checkpoint for cell {cell} (regime {regime.value}, seed {seed}) at {path}; run `rotens train` first")
    return load_checkpoint(path)


def cmd_analyze_c4(cfg: ExperimentConfig) -> Path:
    """Accuracy of every cell on the original test set turned by each quarter turn."""
    test_set = GridData(cfg).original(Split.TEST)
    rotated = {
        turn: Dataset(rot90_array(test_set.images, turn), test_set.labels, replace(test_set.meta, regime=f"rot{turn.value}"))
        for turn in C4
    }

    rows = []
    for regime in cfg.regimes:
        for seed in cfg.seeds:
            reference = ""
            if "bs" in cfg.modes:
                baseline = _load_cell_model(cfg, "bs", regime, seed)
                reference = repr(evaluate(baseline, test_set, InferenceMode(Mode.PLAIN)))
            for cell in cfg.modes:
                model = _load_cell_model(cfg, cell, regime, seed)
                mode = InferenceMode(RECIPES[cell].eval_mode, cfg.transforms)
                for turn in C4:
                    accuracy = evaluate(model, rotated[turn], mode)
                    rows.append((cell, regime.value, seed, turn.value, repr(accuracy), reference))
                    logger.info("%s regime %s seed %d at %d degrees: %.4f", cell, regime.value, seed, turn.value, accuracy)

    path = cfg.output_dir / ANALYSIS_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("mode", "regime", "seed", "angle", "accuracy", "reference_accuracy"))
        writer.writerows(rows)
    return path


def rank_flags(values: list[float]) -> list[str]:
    """'best' for the single highest value, 'second' for the next; ties go to the earlier row."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    flags = [""] * len(values)
    if order:
        flags[order[0]] = "best"
    if len(order) > 1:
        flags[order[1]] = "second"
    return flags


def cmd_report(cfg: ExperimentConfig) -> str:
    """One table per regime: rows are cells, columns are seeds and their mean."""
    missing, accuracies = [], {}
    for regime in cfg.regimes:
        for cell in cfg.modes:
            for seed in cfg.seeds:
                path = cell_dir(cfg, cell, regime, seed) / "cell.json"
                if not path.is_file():
                    missing.append(f"{cell}/{regime.value}/s{seed}")
                    continue
                accuracies[(regime, cell, seed)] = json.loads(path.read_text())["accuracy"]
    if missing:
        raise DataError(f"The grid in {cfg.output_dir} is incomplete; missing cells: {', '.join(missing)}")

    columns = [f"seed {seed}" for seed in cfg.seeds] + ["mean"]
    tables, lines = {}, []
    for regime in cfg.regimes:
        values = {
            cell: [accuracies[(regime, cell, seed)] for seed in cfg.seeds] for cell in cfg.modes
        }
        for cell in cfg.modes:
            values[cell].append(float(np.mean(values[cell])))
        flags = {cell: [] for cell in cfg.modes}
        for c in range(len(columns)):
            for cell, flag in zip(cfg.modes, rank_flags([values[cell][c] for cell in cfg.modes])):
                flags[cell].append(flag)

        tables[regime.value] = {
            "columns": columns,
            "rows": [
                {"cell": cell, "accuracy": dict(zip(columns, values[cell])), "flags": dict(zip(columns, flags[cell]))}
                for cell in cfg.modes
            ],
        }
        marks = {"best": "*", "second": "+", "": " "}
        lines.append(f"Regime {regime.value}")
        lines.append("  ".join([f"{'cell':<10}"] + [f"{c:>10}" for c in columns]))
        for cell in cfg.modes:
            cells = [f"{v * 100:9.2f}{marks[flag]}" for v, flag in zip(values[cell], flags[cell])]
            lines.append("  ".join([f"{cell:<10}"] + cells))
        lines.append("")
    lines.append("* best  + second best")
    text = "\n".join(lines) + "\n"

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / REPORT_NAMES[0]).write_text(text)
    (cfg.output_dir / REPORT_NAMES[1]).write_text(json.dumps({"regimes": tables}, indent=2, sort_keys=True) + "\n")
    return text
