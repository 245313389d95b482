"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations executed inside ``with Tape():`` are recorded when at least one input
requires a gradient; outside a tape they run as plain array code. The active tape is
held in a context variable, so independent tapes on different threads never share state.

Broadcasting is limited to a leading batch dimension: the smaller operand's shape must
equal the trailing dimensions of the larger one.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ContractError, DimensionError, TokenIndexError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

DEFAULT_DTYPE = np.float32

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "_tape", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self._tape: Optional[Tape] = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(_lift(other, self), self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def exp(self) -> "Tensor":
        return exp(self)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations; entries are appended in execution
    order, so every entry's inputs were produced before it."""

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        output.requires_grad = True
        output.is_leaf = False
        output._tape = self
        self.entries.append(TapeEntry(op, inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    grads[key] = grad if key not in grads else grads[key] + grad
        self.entries.clear()


def backward(loss: Tensor) -> None:
    """Populates `.grad` on every leaf that requires a gradient; the tape is consumed."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not connected to a tape")
    loss._tape.backward(loss)


def apply_op(op: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wraps `out_data` as the output of `op`, recording `backward_fn` when needed."""
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def no_grad_active() -> bool:
    return _active_tape.get() is None


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    small, large = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.ndim and large.shape[large.ndim - small.ndim:] != small.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ beyond a leading batch dimension")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    return apply_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    return apply_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    return apply_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    c = np.asarray(factor, dtype=a.dtype)
    return apply_op("scale", (a,), a.data * c, lambda g: (g * c,))


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")

    def backward_fn(g: np.ndarray):
        grad_a = g @ _swap_last(b.data)
        if b.ndim == 2 and a.ndim > 2:
            k, m = b.shape
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            grad_b = _swap_last(a.data) @ g
        return grad_a, grad_b

    return apply_op("matmul", (a, b), a.data @ b.data, backward_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def backward_fn(g: np.ndarray):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return apply_op("sum", (a,), out, backward_fn)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return apply_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice `start:stop` along `axis`."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g: np.ndarray):
        grad = np.zeros_like(a.data)
        grad[index] = g
        return (grad,)

    return apply_op("narrow", (a,), a.data[index], backward_fn)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis followed by a learned gain."""
    if weight.shape != x.shape[-1:]:
        raise DimensionError(f"rms_norm gain {weight.shape} does not match features {x.shape[-1:]}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv

    def backward_fn(g: np.ndarray):
        grad_normed = g * weight.data
        grad_x = inv * (grad_normed - normed * np.mean(grad_normed * normed, axis=-1, keepdims=True))
        grad_w = (g * normed).reshape(-1, weight.shape[0]).sum(axis=0)
        return grad_x.astype(x.dtype), grad_w.astype(weight.dtype)

    return apply_op("rms_norm", (x, weight), (normed * weight.data).astype(x.dtype), backward_fn)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return apply_op("silu", (x,), x.data * sig, lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TokenIndexError(f"embedding ids must lie in [0, {table.shape[0]})")

    def backward_fn(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return apply_op("embedding", (table,), table.data[ids], backward_fn)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    """Max-stabilized log-softmax over the last axis; shared by sampling and training."""
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    out = softmax_array(x.data)
    return apply_op("softmax", (x,), out, lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    out = log_softmax_array(x.data)
    return apply_op(
        "log_softmax", (x,), out,
        lambda g: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
    )


def token_logprobs(logits: Tensor, targets: np.ndarray) -> Tensor:
    """log softmax(logits)[..., target] for every leading position."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError(f"target ids must lie in [0, {vocab})")
    logp = log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        grad = -np.exp(logp) * g[..., None]
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) + g[..., None], axis=-1)
        return (grad.astype(logits.dtype),)

    return apply_op("token_logprobs", (logits,), picked, backward_fn)


def softmax_cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    if logits.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy expects rank-1 logits, got {logits.shape}")
    if not 0 <= int(target_index) < logits.shape[0]:
        raise TokenIndexError(f"target {target_index} out of range for vocabulary {logits.shape[0]}")
    return scale(token_logprobs(logits, np.asarray(target_index)), -1.0)


def where_const(condition: np.ndarray, x: Tensor, value: float) -> Tensor:
    """Replaces entries of `x` by the constant `value` where `condition` holds; no
    gradient flows through replaced entries."""
    condition = np.asarray(condition, dtype=bool)
    out = np.where(condition, np.asarray(value, dtype=x.dtype), x.data)
    return apply_op("where_const", (x,), out, lambda g: (np.where(condition, 0.0, g).astype(x.dtype),))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    tolerance: float,
    step: Optional[float] = None,
) -> bool:
    """Compares the taped gradient of scalar `f` at `x` with central differences.

    The error is measured relative to the gradient's scale:
    max|analytic - numeric| / max(max|analytic|, max|numeric|).
    """
    return gradient_error(f, x, step) <= tolerance


def gradient_error(f: Callable[[Tensor], Tensor], x: Tensor, step: Optional[float] = None) -> float:
    if step is None:
        step = 1e-6 if x.dtype == np.float64 else 1e-3

    point = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    with Tape():
        out = f(point)
    backward(out)
    analytic = point.grad if point.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data, dtype=np.float64)
    base = x.data.copy()
    flat = base.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = f(Tensor(base.copy(), dtype=x.dtype)).item()
        flat[i] = original - step
        lower = f(Tensor(base.copy(), dtype=x.dtype)).item()
        flat[i] = original
        numeric.reshape(-1)[i] = (upper - lower) / (2.0 * step)

    scale_ = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale_)
