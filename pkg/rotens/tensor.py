"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a TapeNode to a thread-local tape while it
runs forward; backward() walks that tape in reverse creation order and then
clears it. Tensors are rank 1, 2 or 4 (NCHW) and never broadcast.
"""

import math
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from logging import getLogger
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import DataError, ShapeError, SizeError, TapeStateError

logger = getLogger(__name__)

ALLOWED_RANKS = (1, 2, 4)
MAX_ELEMENTS = 2**34
CHECKPOINT_MAGIC = b"ROTENS1\n"
SCALAR_SHAPE = (1, 1, 1, 1)


class Op(Enum):
    ADD = "add"
    SCALE = "scale"
    MUL = "mul"
    MAXIMUM = "maximum"
    SUM = "sum"
    MEAN = "mean"
    RESHAPE = "reshape"
    CONV2D = "conv2d"
    RELU = "relu"
    MAXPOOL2 = "maxpool2"
    GLOBAL_AVG_POOL = "global_avg_pool"
    LINEAR = "linear"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"
    ROT90 = "rot90"
    FEATURE_MAX = "feature_max"
    FEATURE_MEAN = "feature_mean"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, copy: bool = True):
        array = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if array.ndim not in ALLOWED_RANKS:
            raise ShapeError(
                f"Tensors must have rank {' or '.join(map(str, ALLOWED_RANKS))}, got shape {array.shape}"
            )
        self.data = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


Backward = Callable[[np.ndarray, dict], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    op: Op
    inputs: tuple
    output: Tensor
    backward: Backward
    saved: dict = field(default_factory=dict)


_state = threading.local()


def _tape() -> list[TapeNode]:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on this thread's tape."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def recording_decisions() -> Iterator[list[bytes]]:
    """Collect the branch decisions (masks, winner indices) of non-smooth ops run inside."""
    previous = getattr(_state, "decisions", None)
    _state.decisions = log = []
    try:
        yield log
    finally:
        _state.decisions = previous


def note_decision(decision: np.ndarray) -> None:
    log = getattr(_state, "decisions", None)
    if log is not None:
        log.append(np.ascontiguousarray(decision).tobytes())


def clear_tape() -> None:
    _tape().clear()


def tape_length() -> int:
    return len(_tape())


def apply_op(
    op: Op, inputs: Sequence[Tensor], data: np.ndarray, backward_fn: Backward, **saved
) -> Tensor:
    """Wrap the forward result of an op and record it when any input needs a gradient."""
    requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad, copy=False)
    if requires_grad:
        _tape().append(TapeNode(op, tuple(inputs), out, backward_fn, saved))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every tensor on the tape that requires a gradient."""
    if loss.shape != SCALAR_SHAPE:
        raise ShapeError(f"backward() needs a loss of shape {SCALAR_SHAPE}, got {loss.shape}")
    tape = _tape()
    if not tape or not loss.requires_grad:
        raise TapeStateError(
            "backward() called without a live forward tape (was it already called for this forward pass?)"
        )

    grads: dict[int, np.ndarray] = {id(loss): np.ones(SCALAR_SHAPE)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape):
        upstream = grads.get(id(node.output))
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(upstream, node.saved)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                tensors[key] = tensor

    for key, tensor in tensors.items():
        tensor.grad = grads[key] if tensor.grad is None else tensor.grad + grads[key]
    tape.clear()


def zeros(shape: tuple) -> Tensor:
    shape = tuple(shape)
    if any(not isinstance(d, (int, np.integer)) or d < 0 for d in shape):
        raise ShapeError(f"zeros() needs non-negative integer dims, got {shape}")
    count = math.prod(int(d) for d in shape)
    if count > MAX_ELEMENTS:
        raise SizeError(f"zeros{shape} would hold {count} elements (max {MAX_ELEMENTS})")
    return Tensor(np.zeros(shape), copy=False)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return apply_op(Op.ADD, (a, b), a.data + b.data, lambda grad, saved: (grad, grad))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return apply_op(
        Op.SCALE, (a,), a.data * factor, lambda grad, saved: (grad * saved["factor"],), factor=factor
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return apply_op(
        Op.MUL,
        (a, b),
        a.data * b.data,
        lambda grad, saved: (grad * saved["b"], grad * saved["a"]),
        a=a.data,
        b=b.data,
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    _check_same_shape("maximum", a, b)
    first = a.data >= b.data
    note_decision(first)
    return apply_op(
        Op.MAXIMUM,
        (a, b),
        np.where(first, a.data, b.data),
        lambda grad, saved: (
            np.where(saved["first"], grad, 0.0),
            np.where(saved["first"], 0.0, grad),
        ),
        first=first,
    )


def sum_all(a: Tensor) -> Tensor:
    return apply_op(
        Op.SUM,
        (a,),
        np.full(SCALAR_SHAPE, a.data.sum()),
        lambda grad, saved: (np.full(saved["shape"], grad.item()),),
        shape=a.shape,
    )


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean_all() of an empty tensor")
    return apply_op(
        Op.MEAN,
        (a,),
        np.full(SCALAR_SHAPE, a.data.mean()),
        lambda grad, saved: (np.full(saved["shape"], grad.item() / saved["count"]),),
        shape=a.shape,
        count=a.size,
    )


def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return apply_op(
        Op.RESHAPE,
        (a,),
        a.data.reshape(shape).copy(),
        lambda grad, saved: (grad.reshape(saved["shape"]),),
        shape=a.shape,
    )


def save_tensors(
    path: Union[str, Path], tensors: dict[str, Union[Tensor, np.ndarray]], header: str = ""
) -> None:
    """
    Write named tensors as: magic, u32 header length + UTF-8 header, then per
    tensor u32 name length, name, four u32 dims and raw f64 values, all
    little-endian. Lower-rank tensors are padded with trailing unit dims.
    """
    header_bytes = header.encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for name, value in tensors.items():
        array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        if array.ndim > 4:
            raise ShapeError(f"Cannot checkpoint {name} with shape {array.shape}")
        dims = tuple(array.shape) + (1,) * (4 - array.ndim)
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<4I", *dims))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: Union[str, Path]) -> tuple[str, dict[str, np.ndarray]]:
    """Inverse of save_tensors(); arrays come back with their padded 4-d shape."""
    payload = Path(path).read_bytes()

    def unpack(fmt: str, offset: int) -> tuple:
        size = struct.calcsize(fmt)
        if offset + size > len(payload):
            raise DataError(f"{path}: truncated checkpoint at byte offset {offset}")
        return struct.unpack_from(fmt, payload, offset)

    if not payload.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    offset = len(CHECKPOINT_MAGIC)
    (header_length,) = unpack("<I", offset)
    offset += 4
    if offset + header_length > len(payload):
        raise DataError(f"{path}: truncated checkpoint header at byte offset {offset}")
    header = payload[offset : offset + header_length].decode("utf-8")
    offset += header_length

    tensors: dict[str, np.ndarray] = {}
    while offset < len(payload):
        (name_length,) = unpack("<I", offset)
        offset += 4
        if offset + name_length > len(payload):
            raise DataError(f"{path}: truncated tensor name at byte offset {offset}")
        name = payload[offset : offset + name_length].decode("utf-8")
        offset += name_length
        dims = unpack("<4I", offset)
        offset += 16
        nbytes = 8 * math.prod(dims)
        if offset + nbytes > len(payload):
            raise DataError(f"{path}: truncated values of {name} at byte offset {offset}")
        tensors[name] = (
            np.frombuffer(payload, dtype="<f8", count=math.prod(dims), offset=offset)
            .astype(np.float64)
            .reshape(dims)
        )
        offset += nbytes
    return header, tensors
