"""
Layered CNN graphs split into an enclosed backbone f_F, a tail f_R and a head g,
plus the inference modes built on top of them.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from logging import getLogger
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .ensemble import BranchSet, CombineMode, ScoreSet, feature_max, feature_mean, score_combine
from .errors import DataError, ShapeError
from .geometry import C4, QuarterTurn, reverse, rot90
from .nn_ops import (
    ConvParams,
    LinearParams,
    conv2d,
    flatten,
    global_avg_pool,
    linear,
    maxpool2,
    relu,
)
from .tensor import Tensor, load_tensors, no_grad, save_tensors

logger = getLogger(__name__)

Shape = tuple  # per-sample shape: (c, h, w) for maps, (features,) once flattened


class Layer(ABC):
    @classmethod
    @abstractmethod
    def kind(cls) -> str:
        raise NotImplementedError

    @abstractmethod
    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    @abstractmethod
    def output_shape(self, shape: Shape) -> Shape:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def initialize(self, rng: np.random.Generator) -> None:
        pass

    def describe(self) -> str:
        return self.kind()

    @classmethod
    def parse(cls, args: list[str]) -> "Layer":
        if args:
            raise ValueError(f"Layer {cls.kind()} takes no arguments, got {args}")
        return cls()


def _xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, padding: Optional[int] = None):
        if padding is None:
            padding = (kernel_size - 1) // 2
        self.params = ConvParams(
            weight=Tensor(np.zeros((out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True),
            bias=Tensor(np.zeros(out_channels), requires_grad=True),
            stride=stride,
            padding=padding,
        )

    @classmethod
    def kind(cls) -> str:
        return "conv2d"

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.params)

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3 or shape[0] != self.params.in_channels:
            raise ShapeError(f"conv2d expects ({self.params.in_channels}, h, w) maps, got {shape}")
        _, h, w = shape
        out_h, out_w = self.params.output_side(h), self.params.output_side(w)
        if out_h <= 0 or out_w <= 0:
            raise ShapeError(f"conv2d output would be {out_h}x{out_w} for input {h}x{w}")
        return (self.params.out_channels, out_h, out_w)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.params.weight, "bias": self.params.bias}

    def initialize(self, rng: np.random.Generator) -> None:
        p = self.params
        area = p.kernel_size**2
        p.weight.data[...] = _xavier_uniform(
            rng, p.weight.shape, p.in_channels * area, p.out_channels * area
        )
        p.bias.data[...] = 0.0

    def describe(self) -> str:
        p = self.params
        return f"conv2d {p.in_channels} {p.out_channels} {p.kernel_size} {p.stride} {p.padding}"

    @classmethod
    def parse(cls, args: list[str]) -> "Conv2d":
        in_channels, out_channels, kernel_size, stride, padding = map(int, args)
        return cls(in_channels, out_channels, kernel_size, stride, padding)


class ReLU(Layer):
    @classmethod
    def kind(cls) -> str:
        return "relu"

    def __call__(self, x: Tensor) -> Tensor:
        return relu(x)

    def output_shape(self, shape: Shape) -> Shape:
        return shape


class MaxPool2(Layer):
    @classmethod
    def kind(cls) -> str:
        return "maxpool2"

    def __call__(self, x: Tensor) -> Tensor:
        return maxpool2(x)

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"maxpool2 needs maps with even spatial dims, got {shape}")
        c, h, w = shape
        return (c, h // 2, w // 2)


class GlobalAvgPool(Layer):
    @classmethod
    def kind(cls) -> str:
        return "gap"

    def __call__(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise ShapeError(f"gap needs (c, h, w) maps, got {shape}")
        return (shape[0], 1, 1)


class Flatten(Layer):
    @classmethod
    def kind(cls) -> str:
        return "flatten"

    def __call__(self, x: Tensor) -> Tensor:
        return flatten(x)

    def output_shape(self, shape: Shape) -> Shape:
        return (math.prod(shape),)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int):
        self.params = LinearParams(
            weight=Tensor(np.zeros((out_features, in_features)), requires_grad=True),
            bias=Tensor(np.zeros(out_features), requires_grad=True),
        )

    @classmethod
    def kind(cls) -> str:
        return "linear"

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.params)

    def output_shape(self, shape: Shape) -> Shape:
        out_features, in_features = self.params.weight.shape
        if shape != (in_features,):
            raise ShapeError(f"linear expects ({in_features},) features, got {shape}")
        return (out_features,)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.params.weight, "bias": self.params.bias}

    def initialize(self, rng: np.random.Generator) -> None:
        out_features, in_features = self.params.weight.shape
        self.params.weight.data[...] = _xavier_uniform(
            rng, self.params.weight.shape, in_features, out_features
        )
        self.params.bias.data[...] = 0.0

    def describe(self) -> str:
        out_features, in_features = self.params.weight.shape
        return f"linear {in_features} {out_features}"

    @classmethod
    def parse(cls, args: list[str]) -> "Linear":
        in_features, out_features = map(int, args)
        return cls(in_features, out_features)


all_layers = [Conv2d, ReLU, MaxPool2, GlobalAvgPool, Flatten, Linear]


def parse_layer(line: str) -> Layer:
    kind, *args = line.split()
    for layer_type in all_layers:
        if layer_type.kind() == kind:
            return layer_type.parse(args)
    raise ValueError(
        f"Unknown layer {kind!r}. Must be one of {', '.join(t.kind() for t in all_layers)}"
    )


class ModelGraph:
    """
    layers[:split_index] is f_F, layers[split_index:head_start] is f_R and
    layers[head_start:] is the head g.
    """

    def __init__(
        self, layers: list[Layer], split_index: int, head_start: int, input_shape: Shape
    ):
        if not 0 < split_index <= head_start <= len(layers):
            raise ShapeError(
                f"Need 0 < split_index <= head_start <= {len(layers)}, got {split_index}, {head_start}"
            )
        self.layers = layers
        self.split_index = split_index
        self.head_start = head_start
        self.input_shape = tuple(input_shape)
        self.warnings: list[str] = []

        self.shapes = [self.input_shape]
        for layer in layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))
        split_shape = self.shapes[split_index]
        if len(split_shape) != 3 or split_shape[1] != split_shape[2]:
            raise ShapeError(
                f"The feature map at split index {split_index} has shape {split_shape}; it must be square"
            )
        if len(self.shapes[-1]) != 1:
            raise ShapeError(f"The head must end in class scores, got shape {self.shapes[-1]}")

        spatial = [
            f"layer {i} ({layer.describe()})"
            for i, layer in enumerate(layers[split_index:head_start], start=split_index)
            if isinstance(layer, Conv2d) and layer.params.kernel_size > 1
        ]
        if spatial:
            message = (
                f"f_R holds spatial convolutions ({', '.join(spatial)}): "
                "they are not rotation-equivariant, so logits are no longer C4-invariant"
            )
            logger.warning("%s", message)
            self.warnings.append(message)

        head_kinds = [layer.kind() for layer in layers[head_start:]]
        first_linear = head_kinds.index("linear") if "linear" in head_kinds else len(head_kinds)
        if "gap" not in head_kinds[:first_linear]:
            message = (
                "The head has no global average pool before its linear layers: "
                "the ensembled feature map stays C4-equivariant but logits are no longer invariant"
            )
            logger.warning("%s", message)
            self.warnings.append(message)

    @property
    def classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def split_shape(self) -> Shape:
        return self.shapes[self.split_index]

    def _run(self, x: Tensor, start: int, stop: int) -> Tensor:
        for layer in self.layers[start:stop]:
            x = layer(x)
        return x

    def f_F(self, x: Tensor) -> Tensor:
        return self._run(x, 0, self.split_index)

    def f_R(self, z: Tensor) -> Tensor:
        return self._run(z, self.split_index, self.head_start)

    def g(self, z: Tensor) -> Tensor:
        return self._run(z, self.head_start, len(self.layers))

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"layers.{i}.{name}": tensor
            for i, layer in enumerate(self.layers)
            for name, tensor in layer.parameters().items()
        }

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"Model expects input of shape (n, {', '.join(map(str, self.input_shape))}), got {x.shape}")

    def describe(self) -> str:
        lines = [
            f"input {' '.join(map(str, self.input_shape))}",
            f"split {self.split_index}",
            f"head {self.head_start}",
        ]
        lines.extend(f"layer {layer.describe()}" for layer in self.layers)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_description(cls, text: str) -> "ModelGraph":
        input_shape, split_index, head_start, layers = None, None, None, []
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, rest = line.partition(" ")
            if key == "input":
                input_shape = tuple(int(v) for v in rest.split())
            elif key == "split":
                split_index = int(rest)
            elif key == "head":
                head_start = int(rest)
            elif key == "layer":
                layers.append(parse_layer(rest))
            else:
                raise ValueError(f"Unknown architecture line: {line!r}")
        if input_shape is None or split_index is None or head_start is None:
            raise ValueError("Architecture description is missing input/split/head lines")
        return cls(layers, split_index, head_start, input_shape)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise DataError(f"Checkpoint is missing parameters: {', '.join(missing)}")
        for name, tensor in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.size != tensor.size:
                raise DataError(f"Parameter {name} has {value.size} values, expected {tensor.size}")
            tensor.data[...] = value.reshape(tensor.shape)


class Mode(Enum):
    PLAIN = "plain"
    TTA_MEAN = "tta_mean"
    TTA_MAX = "tta_max"
    OURS_MEAN = "ours_mean"
    OURS_MAX = "ours_max"


@dataclass(frozen=True)
class InferenceMode:
    mode: Mode = Mode.PLAIN
    transforms: tuple[QuarterTurn, ...] = C4

    def __post_init__(self):
        if not self.transforms:
            raise ValueError("An inference mode needs at least one transform")

    @classmethod
    def parse(cls, name: str, transforms: Sequence[QuarterTurn] = C4) -> "InferenceMode":
        try:
            mode = Mode(name)
        except ValueError:
            raise ValueError(
                f"Unknown inference mode {name!r}. Must be one of {', '.join(m.value for m in Mode)}"
            )
        return cls(mode, tuple(transforms))

    @property
    def name(self) -> str:
        return self.mode.value

    @property
    def is_ensemble(self) -> bool:
        return self.mode in (Mode.OURS_MEAN, Mode.OURS_MAX)

    @property
    def is_tta(self) -> bool:
        return self.mode in (Mode.TTA_MEAN, Mode.TTA_MAX)


def _require_square_input(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ShapeError(f"Transform ensembles need square inputs, got shape {x.shape}")


def forward_plain(m: ModelGraph, x: Tensor) -> Tensor:
    m.check_input(x)
    return m.g(m.f_R(m.f_F(x)))


def forward_branches(
    m: ModelGraph, x: Tensor, transforms: Sequence[QuarterTurn] = C4
) -> BranchSet:
    """z_n = T^-1(f_F(T(x; t_n)); t_n) for each transform, in order."""
    m.check_input(x)
    _require_square_input(x)
    branches = [reverse(m.f_F(rot90(x, t)), t) for t in transforms]
    return BranchSet(branches, tuple(transforms))


def forward_ours(m: ModelGraph, x: Tensor, mode: InferenceMode) -> Tensor:
    if not mode.is_ensemble:
        raise ValueError(f"forward_ours needs an ours_* mode, got {mode.name}")
    Z = forward_branches(m, x, mode.transforms)
    z_hat = feature_max(Z) if mode.mode is Mode.OURS_MAX else feature_mean(Z)
    return m.g(m.f_R(z_hat))


def forward_tta(m: ModelGraph, x: Tensor, mode: InferenceMode) -> np.ndarray:
    if not mode.is_tta:
        raise ValueError(f"forward_tta needs a tta_* mode, got {mode.name}")
    _require_square_input(x)
    scores = ScoreSet([forward_plain(m, rot90(x, t)).data for t in mode.transforms])
    return score_combine(scores, CombineMode.MAX if mode.mode is Mode.TTA_MAX else CombineMode.MEAN)


def forward(m: ModelGraph, x: Tensor, mode: InferenceMode) -> Tensor:
    """The differentiable training path: the ensemble for ours_* modes, the plain network otherwise."""
    if mode.is_ensemble:
        return forward_ours(m, x, mode)
    return forward_plain(m, x)


def predict(m: ModelGraph, x: Tensor, mode: InferenceMode) -> np.ndarray:
    """Class scores for mode: logits, or combined softmax scores for TTA."""
    with no_grad():
        if mode.is_tta:
            return forward_tta(m, x, mode)
        return forward(m, x, mode).data


ARCHITECTURES = ("small_cnn",)
DEFAULT_WIDTHS = (8, 8, 16, 16)
# Four conv-relu pairs and two pools precede the head
SMALL_CNN_HEAD_START = 10


def build_default(
    arch: str = "small_cnn",
    classes: int = 10,
    input_shape: Shape = (1, 28, 28),
    seed: int = 0,
    widths: Sequence[int] = DEFAULT_WIDTHS,
    split_index: Optional[int] = None,
) -> ModelGraph:
    """
    small_cnn: conv-relu, conv-relu, maxpool2, conv-relu, conv-relu, maxpool2
    as f_F (3x3 convs, 'same' padding), identity f_R, and gap-flatten-linear
    as g. Weights are Xavier-uniform from seed, biases zero.
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"Unknown architecture {arch!r}. Must be one of {', '.join(ARCHITECTURES)}")
    if len(widths) != 4 or min(widths) < 1:
        raise ValueError(f"small_cnn needs four positive conv widths, got {tuple(widths)}")
    channels, h, w = input_shape
    if h != w or h % 4 or h == 0:
        raise ShapeError(f"small_cnn needs a square input with side divisible by 4, got {h}x{w}")

    layers: list[Layer] = [
        Conv2d(channels, widths[0]),
        ReLU(),
        Conv2d(widths[0], widths[1]),
        ReLU(),
        MaxPool2(),
        Conv2d(widths[1], widths[2]),
        ReLU(),
        Conv2d(widths[2], widths[3]),
        ReLU(),
        MaxPool2(),
    ]
    head_start = SMALL_CNN_HEAD_START
    layers += [GlobalAvgPool(), Flatten(), Linear(widths[3], classes)]

    rng = np.random.default_rng(seed)
    for layer in layers:
        layer.initialize(rng)
    return ModelGraph(
        layers,
        split_index=head_start if split_index is None else split_index,
        head_start=head_start,
        input_shape=(channels, h, w),
    )


def save_checkpoint(m: ModelGraph, path: Union[str, Path]) -> None:
    save_tensors(path, m.parameters(), header=m.describe())


def load_checkpoint(path: Union[str, Path]) -> ModelGraph:
    if not Path(path).is_file():
        raise DataError(f"Checkpoint not found: {path}")
    header, tensors = load_tensors(path)
    try:
        m = ModelGraph.from_description(header)
    except ValueError as e:
        raise DataError(f"{path}: invalid architecture header: {e}")
    m.load_state_dict(tensors)
    return m
