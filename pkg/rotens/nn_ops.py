"""Layer vocabulary for the backbone, tail and head: conv, ReLU, pooling, linear, loss."""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ShapeError
from .tensor import SCALAR_SHAPE, Op, Tensor, apply_op, note_decision, reshape


@dataclass
class ConvParams:
    weight: Tensor  # (out_ch, in_ch, k, k)
    bias: Tensor  # (out_ch,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"Conv weight must be rank 4, got shape {self.weight.shape}")
        out_ch, _, k, k2 = self.weight.shape
        if k != k2 or k % 2 == 0:
            raise ShapeError(f"Conv kernels must be square with odd size, got {k}x{k2}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"Conv bias must have shape ({out_ch},), got {self.bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"Invalid conv geometry: stride={self.stride} padding={self.padding}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def output_side(self, side: int) -> int:
        return (side + 2 * self.padding - self.kernel_size) // self.stride + 1


@dataclass
class LinearParams:
    weight: Tensor  # (out_features, in_features)
    bias: Tensor  # (out_features,)

    def __post_init__(self):
        if self.weight.ndim != 2 or 0 in self.weight.shape:
            raise ShapeError(f"Linear weight must be a non-empty matrix, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"Linear bias must have shape ({self.weight.shape[0]},), got {self.bias.shape}"
            )


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation (no kernel flip) with symmetric zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv2d expects {p.in_channels} input channels, got {c}")
    out_h, out_w = p.output_side(h), p.output_side(w)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d output would be {out_h}x{out_w} for input {h}x{w}")

    pad, k, stride = p.padding, p.kernel_size, p.stride
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, p.weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + p.bias.data[None, :, None, None]
    return apply_op(
        Op.CONV2D,
        (x, p.weight, p.bias),
        np.ascontiguousarray(out),
        _conv2d_backward,
        windows=windows,
        weight=p.weight.data,
        stride=stride,
        padding=pad,
        input_shape=x.shape,
        input_requires_grad=x.requires_grad,
    )


def _conv2d_backward(grad: np.ndarray, saved: dict):
    weight, stride, pad = saved["weight"], saved["stride"], saved["padding"]
    grad_bias = grad.sum(axis=(0, 2, 3))
    grad_weight = np.tensordot(grad, saved["windows"], axes=([0, 2, 3], [0, 2, 3]))
    if not saved["input_requires_grad"]:
        return None, grad_weight, grad_bias

    n, c, h, w = saved["input_shape"]
    k = weight.shape[2]
    out_h, out_w = grad.shape[2:]
    grad_padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            contribution = np.tensordot(grad, weight[:, :, i, j], axes=([1], [0]))
            grad_padded[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ] += contribution.transpose(0, 3, 1, 2)
    grad_input = grad_padded[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(grad_input), grad_weight, grad_bias


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    note_decision(active)
    return apply_op(
        Op.RELU,
        (x,),
        np.where(active, x.data, 0.0),
        lambda grad, saved: (np.where(saved["active"], grad, 0.0),),
        active=active,
    )


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first window element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    winner = blocks.argmax(axis=-1)
    note_decision(winner)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]
    return apply_op(Op.MAXPOOL2, (x,), out, _maxpool2_backward, winner=winner, input_shape=x.shape)


def _maxpool2_backward(grad: np.ndarray, saved: dict):
    n, c, h, w = saved["input_shape"]
    blocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, saved["winner"][..., None], grad[..., None], axis=-1)
    grad_input = (
        blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    )
    return (grad_input,)


def global_avg_pool(x: Tensor) -> Tensor:
    """
    Per-channel spatial mean, shape (n, c, 1, 1).

    Values are summed in sorted order, so the result depends only on the
    multiset of each channel's values: any spatial permutation (including a
    quarter turn) gives a bitwise-identical mean.
    """
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("global_avg_pool of an empty spatial map")
    ordered = np.sort(x.data.reshape(n, c, h * w), axis=-1)
    out = (ordered.sum(axis=-1) / (h * w)).reshape(n, c, 1, 1)
    return apply_op(
        Op.GLOBAL_AVG_POOL,
        (x,),
        out,
        lambda grad, saved: (np.broadcast_to(grad / (h * w), saved["input_shape"]).copy(),),
        input_shape=x.shape,
    )


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], math.prod(x.shape[1:])))


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(
            f"linear expects input of shape (n, {p.weight.shape[1]}), got {x.shape}"
        )
    return apply_op(
        Op.LINEAR,
        (x, p.weight, p.bias),
        x.data @ p.weight.data.T + p.bias.data,
        lambda grad, saved: (grad @ saved["weight"], grad.T @ saved["x"], grad.sum(axis=0)),
        x=x.data,
        weight=p.weight.data,
    )


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (batch, classes) array, stabilised by max subtraction."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} do not match labels {labels.shape}"
        )
    n, classes = logits.shape
    if n == 0:
        raise ShapeError("softmax_cross_entropy of an empty batch")
    if labels.min() < 0 or labels.max() >= classes:
        raise DataError(f"Labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (log_norm - shifted[rows, labels]).mean()
    probs = np.exp(shifted - log_norm[:, None])

    def _backward(grad: np.ndarray, saved: dict):
        delta = saved["probs"].copy()
        delta[rows, saved["labels"]] -= 1.0
        return (delta * (grad.item() / n),)

    return apply_op(
        Op.SOFTMAX_CROSS_ENTROPY,
        (logits,),
        np.full(SCALAR_SHAPE, loss),
        _backward,
        probs=probs,
        labels=labels,
    )
