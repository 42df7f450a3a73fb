"""
Numeric self-checks run by `rotens selftest`: exact C4 invariance of the
ensembled logits, equivariance of the ensembled feature map, and gradient
agreement with central differences on a tiny model.
"""

from dataclasses import dataclass
from logging import getLogger
from typing import Callable

import numpy as np

from .ensemble import feature_max, feature_mean
from .errors import NumericError
from .geometry import C4, rot90, rot90_array
from .gradcheck import check_gradients
from .model import InferenceMode, Mode, ModelGraph, build_default, forward_branches, forward_ours
from .nn_ops import softmax_cross_entropy
from .tensor import Tensor, no_grad

logger = getLogger(__name__)

INVARIANCE_SAMPLES = 100
MEAN_INVARIANCE_TOLERANCE = 1e-9
MEAN_EQUIVARIANCE_TOLERANCE = 1e-12
GRADIENT_TOLERANCE = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _relative_deviation(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max(initial=0.0) / (np.abs(b).max(initial=0.0) + 1e-300))


def check_invariance(model: ModelGraph, x: np.ndarray) -> list[CheckResult]:
    results = []
    with no_grad():
        for mode in (Mode.OURS_MAX, Mode.OURS_MEAN):
            inference = InferenceMode(mode)
            reference = forward_ours(model, Tensor(x), inference).data
            worst = 0.0
            exact = True
            for turn in C4[1:]:
                turned = forward_ours(model, Tensor(rot90_array(x, turn)), inference).data
                exact &= bool(np.array_equal(turned, reference))
                worst = max(worst, _relative_deviation(turned, reference))
            passed = exact if mode is Mode.OURS_MAX else worst <= MEAN_INVARIANCE_TOLERANCE
            results.append(
                CheckResult(f"invariance/{mode.value}", passed, f"max relative deviation {worst:.3g}")
            )
    return results


def check_equivariance(model: ModelGraph, x: np.ndarray) -> list[CheckResult]:
    results = []
    with no_grad():
        reference = forward_branches(model, Tensor(x))
        for name, combine, tolerance in (
            ("max", feature_max, 0.0),
            ("mean", feature_mean, MEAN_EQUIVARIANCE_TOLERANCE),
        ):
            z_hat = combine(reference).data
            worst = 0.0
            exact = True
            for turn in C4[1:]:
                turned = combine(forward_branches(model, rot90(Tensor(x), turn))).data
                expected = rot90_array(z_hat, turn)
                exact &= bool(np.array_equal(turned, expected))
                worst = max(worst, _relative_deviation(turned, expected))
            passed = exact if tolerance == 0.0 else worst <= tolerance
            results.append(
                CheckResult(f"equivariance/{name}", passed, f"max relative deviation {worst:.3g}")
            )
    return results


def check_model_gradients(seed: int = 0) -> list[CheckResult]:
    """Gradients of the ensembled loss on a tiny model, for every parameter and the input."""
    model = build_default(classes=3, input_shape=(1, 8, 8), seed=seed, widths=(2, 2, 3, 3))
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, size=(2, 1, 8, 8)), requires_grad=True)
    labels = np.array([0, 2])

    results = []
    for mode in (Mode.OURS_MAX, Mode.OURS_MEAN):
        inference = InferenceMode(mode)

        def loss() -> Tensor:
            return softmax_cross_entropy(forward_ours(model, x, inference), labels)

        tensors = {"input": x, **model.parameters()}
        for check in check_gradients(loss, tensors, tolerance=GRADIENT_TOLERANCE):
            results.append(
                CheckResult(
                    f"gradient/{mode.value}/{check.name}",
                    check.passed,
                    f"relative error {check.relative_error:.3g}, {check.kinks} entries on a kink skipped",
                )
            )
    return results


def run_selftest(seed: int = 0, samples: int = INVARIANCE_SAMPLES) -> list[CheckResult]:
    model = build_default(seed=seed)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(samples, *model.input_shape))

    checks: list[Callable[[], list[CheckResult]]] = [
        lambda: check_invariance(model, x),
        lambda: check_equivariance(model, x),
        lambda: check_model_gradients(seed),
    ]
    results = []
    for check in checks:
        for result in check():
            logger.info("%s %s (%s)", "PASS" if result.passed else "FAIL", result.name, result.detail)
            results.append(result)

    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"Self-test failed: {', '.join(failed)}")
    return results
