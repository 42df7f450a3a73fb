from .ensemble import BranchSet, CombineMode, ScoreSet, feature_max, feature_mean, score_combine
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NumericError,
    RotensError,
    ShapeError,
    SizeError,
    TapeStateError,
)
from .geometry import C4, ContinuousTransform, QuarterTurn, reverse, rot90, warp
from .model import (
    InferenceMode,
    Mode,
    ModelGraph,
    build_default,
    forward,
    forward_branches,
    forward_ours,
    forward_plain,
    forward_tta,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .tensor import Tensor, backward, no_grad, zeros

__all__ = [
    "BranchSet",
    "C4",
    "CombineMode",
    "ConfigError",
    "ContinuousTransform",
    "DataError",
    "DivergenceError",
    "InferenceMode",
    "Mode",
    "ModelGraph",
    "NumericError",
    "QuarterTurn",
    "RotensError",
    "ScoreSet",
    "ShapeError",
    "SizeError",
    "TapeStateError",
    "Tensor",
    "backward",
    "build_default",
    "feature_max",
    "feature_mean",
    "forward",
    "forward_branches",
    "forward_ours",
    "forward_plain",
    "forward_tta",
    "load_checkpoint",
    "no_grad",
    "predict",
    "reverse",
    "rot90",
    "save_checkpoint",
    "score_combine",
    "warp",
    "zeros",
]
