# app/autodiff.py
"""
Module: autodiff.py

A small dense tensor type with reverse-mode automatic differentiation. It is
just large enough to express the multi-head network and its four losses.

Every differentiable operation is a ``Function`` subclass with a ``forward``
working on numpy arrays and a ``backward`` mapping the output gradient to one
gradient per input. Calling ``Function.apply`` wires the result into the graph
when any input requires a gradient. ``backward(loss)`` builds a ``GradTape``
(the operation records in topological order) and walks it once in reverse.

All data is float64. Broadcasting is limited to equal shapes and
scalar-versus-tensor; anything else raises ``ShapeError``.

Strict mode (on by default) checks every operation output for NaN/inf and
raises ``NumericalError`` naming the operation. See ``strict_mode``.
"""
from __future__ import annotations

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
Operand = Union["Tensor", float, int]

_strict: contextvars.ContextVar[bool] = contextvars.ContextVar("strict", default=True)


@contextlib.contextmanager
def strict_mode(enabled: bool = True) -> Iterator[None]:
    """Enable or disable non-finite checks for the current context."""
    token = _strict.set(enabled)
    try:
        yield
    finally:
        _strict.reset(token)


def set_strict(enabled: bool) -> None:
    _strict.set(enabled)


def is_strict() -> bool:
    return _strict.get()


_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording any graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient (or None) per input tensor, in input order.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @property
    def name(self) -> str:
        return type(self).__name__.lower()

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        with np.errstate(all="ignore"):
            out = fn.forward(*(t.data for t in inputs), **kwargs)
        if _strict.get() and not np.all(np.isfinite(out)):
            logger.error(f"Non-finite output from {fn.name}")
            raise NumericalError(fn.name)
        requires_grad = _grad_enabled.get() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, grad_node=fn if requires_grad else None, _copy=False)


class Tensor:
    """
    Dense float64 array plus gradient bookkeeping.

    Leaves created by the user carry ``grad_node=None``; results of operations
    on tensors that require gradients carry the producing ``Function``.
    ``grad`` is only populated on leaves with ``requires_grad=True``.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        grad_node: Optional[Function] = None,
        _copy: bool = True,
    ):
        arr = np.array(data, dtype=np.float64) if _copy else np.ascontiguousarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad_node = grad_node
        self.grad: Optional[np.ndarray] = None

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError("accumulate_grad", grad.shape, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------
    # operators
    # ------------------------------------------------------------------
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def clip(self, low: float, high: float) -> "Tensor":
        return clip(self, low, high)


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # scalar operand: every output element contributed to it
    return np.asarray(grad.sum()).reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    logger.error(f"Shape mismatch in {op}: {a.shape} vs {b.shape}")
    raise ShapeError(op, a.shape, b.shape)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
class Add(Function):
    def forward(self, a, b):
        _check_broadcast("add", a, b)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast("sub", a, b)
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast("mul", a, b)
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_broadcast("div", a, b)
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        ga = grad / b.data
        gb = -grad * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Clip(Function):
    def forward(self, a, low: float, high: float):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


def add(a: Operand, b: Operand) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: Operand, b: Operand) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a: Operand, b: Operand) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a: Operand, b: Operand) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def scale(a: Tensor, factor: float) -> Tensor:
    """Scalar multiplication."""
    return Mul.apply(a, Tensor(float(factor)))


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    return Clip.apply(a, low=low, high=high)


# ----------------------------------------------------------------------
# reductions and shape plumbing
# ----------------------------------------------------------------------
class Sum(Function):
    def forward(self, a, axis: Optional[int] = None):
        self.axis = axis
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is None:
            return (np.full(shape, float(grad)),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape: Tuple[int, ...]):
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", a.shape, shape) from None

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Concat(Function):
    """Concatenation along the leading axis."""

    def forward(self, *arrays):
        tail = arrays[0].shape[1:]
        for arr in arrays[1:]:
            if arr.shape[1:] != tail:
                raise ShapeError("concat", arrays[0].shape, arr.shape)
        self.sizes = [arr.shape[0] for arr in arrays]
        return np.concatenate(arrays, axis=0)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=0))


class SliceRows(Function):
    def forward(self, a, start: int, stop: int):
        if not 0 <= start <= stop <= a.shape[0]:
            raise ShapeError("slice_rows", a.shape, (start, stop))
        self.start, self.stop = start, stop
        return a[start:stop].copy()

    def backward(self, grad):
        out = np.zeros(self.inputs[0].shape)
        out[self.start:self.stop] = grad
        return (out,)


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return Sum.apply(a, axis=axis)


def tensor_mean(a: Tensor) -> Tensor:
    return scale(tensor_sum(a), 1.0 / a.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return Concat.apply(*tensors)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    return SliceRows.apply(a, start=start, stop=stop)


# ----------------------------------------------------------------------
# linear algebra and layers
# ----------------------------------------------------------------------
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            logger.error(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return grad @ b.data.T, a.data.T @ grad


class AddBias(Function):
    """Adds a per-column bias vector to every row of a matrix."""

    def forward(self, x, b):
        if x.ndim != 2 or b.shape != (x.shape[1],):
            raise ShapeError("add_bias", x.shape, b.shape)
        return x + b

    def backward(self, grad):
        return grad, grad.sum(axis=0)


class Conv2d(Function):
    """
    Direct 2-D cross-correlation over a batch ``n×c_in×h×w``.

    The kernel loop runs over the ``kh×kw`` taps; each tap is one tensordot
    against the strided input window, so no FFT and no im2col buffer.
    """

    def forward(self, x, w, b=None, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or stride < 1 or padding < 0:
            raise ShapeError("conv2d", x.shape, w.shape)
        n, _, h, wd = x.shape
        c_out, _, kh, kw = w.shape
        if kh > h + 2 * padding or kw > wd + 2 * padding:
            raise ShapeError("conv2d", x.shape, w.shape)
        if b is not None and b.shape != (c_out,):
            raise ShapeError("conv2d bias", b.shape, (c_out,))
        self.stride, self.padding = stride, padding
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        self.out_hw = (ho, wo)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp = xp
        acc = np.zeros((n, ho, wo, c_out))
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                acc += np.tensordot(window, w[:, :, i, j], axes=([1], [1]))
        if b is not None:
            acc += b
        return acc.transpose(0, 3, 1, 2)

    def backward(self, grad):
        x, w = self.inputs[0], self.inputs[1]
        wdata = w.data
        stride, padding = self.stride, self.padding
        ho, wo = self.out_hw
        _, _, kh, kw = wdata.shape
        g = grad.transpose(0, 2, 3, 1)
        dxp = np.zeros_like(self.xp)
        dw = np.zeros_like(wdata)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * (ho - 1) + 1, stride)
                cols = slice(j, j + stride * (wo - 1) + 1, stride)
                window = self.xp[:, :, rows, cols]
                dw[:, :, i, j] = np.tensordot(g, window, axes=([0, 1, 2], [0, 2, 3]))
                dxp[:, :, rows, cols] += np.tensordot(g, wdata[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        h, wd = x.shape[2], x.shape[3]
        dx = dxp[:, :, padding:padding + h, padding:padding + wd]
        if len(self.inputs) == 3:
            return dx, dw, grad.sum(axis=(0, 2, 3))
        return dx, dw


class MaxPool2d(Function):
    """2×2 max pooling with stride 2; ties resolve to the first window element."""

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError("max_pool2d", x.shape)
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.argmax = windows.argmax(axis=-1)
        return np.take_along_axis(windows, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.inputs[0].shape
        windows = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(windows, self.argmax[..., None], grad[..., None], axis=-1)
        return (windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)


class LogSoftmax(Function):
    def forward(self, logits):
        if logits.ndim != 2:
            raise ShapeError("log_softmax", logits.shape)
        shifted = logits - logits.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.probs * grad.sum(axis=1, keepdims=True),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return AddBias.apply(x, b)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Convolve ``x`` with ``kernels``.

    ``x`` is either a single image ``c_in×h×w`` or a batch ``n×c_in×h×w``;
    the output keeps the same rank. Output extents are
    ``floor((h + 2*padding - kh) / stride) + 1`` and analogously for width.
    """
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernels, bias, stride, padding)
        return reshape(out, out.shape[1:])
    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return Conv2d.apply(*inputs, stride=stride, padding=padding)


def max_pool2d(x: Tensor) -> Tensor:
    return MaxPool2d.apply(x)


def log_softmax(logits: Tensor) -> Tensor:
    return LogSoftmax.apply(logits)


def softmax(logits: Tensor) -> Tensor:
    return exp(log_softmax(logits))


def stop_gradient(x: Tensor) -> Tensor:
    """Return a detached copy of ``x``: same values, no graph, no gradient."""
    return Tensor(x.data, requires_grad=False)


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TapeRecord:
    node: Function
    output: Tensor


class GradTape:
    """
    Operation records of one graph in topological order.

    Every record's inputs are produced by earlier records (or are leaves);
    ``backward`` visits each record exactly once, last to first.
    """

    def __init__(self, records: List[TapeRecord], leaves: List[Tensor]):
        self.records = records
        self.leaves = leaves

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_output(cls, output: Tensor) -> "GradTape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.grad_node is not None:
                for parent in reversed(tensor.grad_node.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        records = [TapeRecord(t.grad_node, t) for t in order if t.grad_node is not None]
        leaves = [t for t in order if t.grad_node is None and t.requires_grad]
        return cls(records, leaves)

    def backward(self, output: Tensor, seed: np.ndarray) -> None:
        pending: Dict[int, np.ndarray] = {id(output): seed}
        if output.grad_node is None and output.requires_grad:
            output.accumulate_grad(seed)
        for record in reversed(self.records):
            grad = pending.pop(id(record.output), None)
            if grad is None:
                continue
            for inp, inp_grad in zip(record.node.inputs, record.node.backward(grad)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                if inp.grad_node is None:
                    inp.accumulate_grad(inp_grad)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + inp_grad
                else:
                    pending[id(inp)] = inp_grad
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def backward(loss: Tensor) -> GradTape:
    """
    Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf.

    Repeated calls add to existing gradients; use ``zero_grads`` in between.
    """
    if loss.size != 1:
        logger.error(f"backward() called on non-scalar tensor of shape {loss.shape}")
        raise ShapeError("backward", loss.shape)
    tape = GradTape.from_output(loss)
    logger.debug(f"backward() over {len(tape)} records, {len(tape.leaves)} leaves")
    tape.backward(loss, np.ones_like(loss.data))
    return tape


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """
    Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Returns the max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    ``x`` must be a trainable leaf; its ``.grad`` is reset before the check.
    """
    x.zero_grad()
    backward(f(x))
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for idx in range(flat.size):
        original = flat[idx]
        flat[idx] = original + step
        plus = f(x).item()
        flat[idx] = original - step
        minus = f(x).item()
        flat[idx] = original
        numeric[idx] = (plus - minus) / (2.0 * step)
    x.zero_grad()
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
