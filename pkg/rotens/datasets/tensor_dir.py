"""
Directory layout for square image tensors, one set of files per split:

  <split>.rtds        "RTDS", u32 count, u32 channels, u32 side (LE), then f32 pixels
  <split>.labels      "RTDL", u32 count, then u32 labels (LE)
  <split>.params.csv  index,angle_deg,scale for generated data
  <split>.preview.png contact sheet of the first images
"""

import csv
import struct
from logging import getLogger
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from ..errors import DataError
from .base import Dataset, DatasetMeta, DatasetSource, Split

logger = getLogger(__name__)

IMAGES_MAGIC = b"RTDS"
LABELS_MAGIC = b"RTDL"
PARAMS_COLUMNS = ("index", "angle_deg", "scale")
PREVIEW_GRID = 8


def _read(path: Path, magic: bytes, header_fields: int) -> tuple[tuple, bytes]:
    if not path.is_file():
        raise DataError(f"Dataset file not found: {path}")
    payload = path.read_bytes()
    header_size = 4 + 4 * header_fields
    if len(payload) < header_size:
        raise DataError(f"{path}: truncated header at byte offset {len(payload)}")
    if payload[:4] != magic:
        raise DataError(f"{path}: bad magic {payload[:4]!r} at byte offset 0, expected {magic!r}")
    return struct.unpack_from(f"<{header_fields}I", payload, 4), payload[header_size:]


def _read_params(path: Path) -> tuple[tuple[float, ...], tuple[float, ...]]:
    angles, scales = [], []
    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != PARAMS_COLUMNS:
            raise DataError(f"{path}: expected columns {','.join(PARAMS_COLUMNS)}, got {reader.fieldnames}")
        for line_number, row in enumerate(reader, start=2):
            try:
                angles.append(float(row["angle_deg"]))
                scales.append(float(row["scale"]))
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line_number}: invalid parameter row {row}")
    return tuple(angles), tuple(scales)


def read_tensor_dir(directory: Union[str, Path], split: Split, regime: str = "none") -> Dataset:
    directory = Path(directory)
    images_path = directory / f"{split.value}.rtds"
    labels_path = directory / f"{split.value}.labels"

    (count, channels, side), pixels = _read(images_path, IMAGES_MAGIC, 3)
    expected = 4 * count * channels * side * side
    if len(pixels) < expected:
        raise DataError(
            f"{images_path}: truncated pixels at byte offset {16 + len(pixels)}, expected {16 + expected} bytes"
        )
    (label_count,), label_bytes = _read(labels_path, LABELS_MAGIC, 1)
    if len(label_bytes) < 4 * label_count:
        raise DataError(f"{labels_path}: truncated labels at byte offset {8 + len(label_bytes)}")
    if label_count != count:
        raise DataError(f"{images_path} holds {count} images but {labels_path} holds {label_count} labels")

    images = np.frombuffer(pixels, dtype="<f4", count=count * channels * side * side)
    labels = np.frombuffer(label_bytes, dtype="<u4", count=count)

    angles, scales = (), ()
    params_path = directory / f"{split.value}.params.csv"
    if params_path.is_file():
        angles, scales = _read_params(params_path)
        if len(angles) != count:
            raise DataError(f"{params_path} has {len(angles)} rows for {count} images")
    elif regime != "none":
        logger.warning("No parameter sidecar %s; per-angle analyses are unavailable", params_path)

    logger.info("Read %d %s images of %dx%d from %s", count, split.value, side, side, directory)
    return Dataset(
        images.astype(np.float64).reshape(count, channels, side, side),
        labels.astype(np.int64),
        DatasetMeta(source=directory.name, regime=regime, angles=angles, scales=scales),
    )


def write_tensor_dir(directory: Union[str, Path], split: Split, dataset: Dataset) -> None:
    """Write dataset (unstandardized) plus its parameter sidecar and preview."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count, channels, side, side2 = dataset.images.shape
    if side != side2:
        raise DataError(f"Only square images can be stored, got {side}x{side2}")
    if dataset.meta.mean != 0.0 or dataset.meta.std != 1.0:
        dataset = dataset.destandardize()

    (directory / f"{split.value}.rtds").write_bytes(
        IMAGES_MAGIC
        + struct.pack("<3I", count, channels, side)
        + dataset.images.astype("<f4").tobytes()
    )
    (directory / f"{split.value}.labels").write_bytes(
        LABELS_MAGIC + struct.pack("<I", count) + dataset.labels.astype("<u4").tobytes()
    )
    if dataset.meta.angles:
        with open(directory / f"{split.value}.params.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(PARAMS_COLUMNS)
            for index, (angle, scale) in enumerate(zip(dataset.meta.angles, dataset.meta.scales)):
                writer.writerow((index, repr(float(angle)), repr(float(scale))))
    write_preview(directory / f"{split.value}.preview.png", dataset)


def write_preview(path: Union[str, Path], dataset: Dataset, grid: int = PREVIEW_GRID) -> None:
    """A grid x grid contact sheet of the first images; empty cells stay black."""
    count, channels, side, _ = dataset.images.shape
    sheet = np.zeros((channels, grid * side, grid * side))
    for n in range(min(count, grid * grid)):
        row, col = divmod(n, grid)
        sheet[:, row * side : (row + 1) * side, col * side : (col + 1) * side] = dataset.images[n]
    pixels = np.rint(np.clip(sheet, 0.0, 1.0) * 255).astype(np.uint8)
    if channels == 1:
        image = Image.fromarray(pixels[0])
    elif channels == 3:
        image = Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))
    else:
        logger.warning("Skipping preview for %d-channel images", channels)
        return
    image.save(path, format="PNG")


class TensorDirSource(DatasetSource):
    """Square images stored directly in data_dir as <split>.rtds / <split>.labels."""

    @classmethod
    def source_name(cls) -> str:
        return "tensor-dir"

    @classmethod
    def is_present(cls, data_dir: Path) -> bool:
        return all((data_dir / f"{split.value}.rtds").is_file() for split in Split)

    def load(self, data_dir: Path, split: Split) -> Dataset:
        return read_tensor_dir(data_dir, split)
