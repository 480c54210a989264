"""
Dense Tensor Module with reverse-mode automatic differentiation
Every differentiable op records a Node on its output. backward() traces the nodes reachable
from a scalar loss into a Graph, replays them in reverse creation order and accumulates
gradients into the requires_grad leaves.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractError, DimensionError, DomainError, ShapeError

DEFAULT_DTYPE = np.float32
COLUMN_CACHE_BYTES = 256 * 1024 * 1024

Scalar = Union[int, float, np.floating]
IntOrTuple = Union[int, Sequence[int]]

_sequence = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Run the enclosed forward computation without recording nodes"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


# GRAPH RECORDS
@dataclass
class Node:
    op: str
    inputs: Tuple["Tensor", ...]
    backward_rule: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
    sequence: int


class Tensor:
    """Dense n-dimensional real array with an optional gradient accumulator"""
    __slots__ = ("values", "requires_grad", "grad", "name", "_node")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is not None:
            array = np.asarray(values, dtype=dtype)
        elif isinstance(values, (np.ndarray, np.floating)) and np.issubdtype(np.asarray(values).dtype, np.floating):
            array = np.asarray(values)
        else:
            array = np.asarray(values, dtype=DEFAULT_DTYPE)
        self.values: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, name=self.name)

    def accumulate_grad(self, gradient: np.ndarray):
        if self.grad is None:
            self.grad = np.array(gradient, dtype=self.values.dtype, copy=True)
        else:
            self.grad += gradient

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # OPERATOR SUGAR
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1):
        return log_softmax(self, axis)


class Graph:
    """Ordered record of the operations that produced a loss"""

    def __init__(self, outputs: List[Tensor]):
        self.outputs = outputs

    @property
    def nodes(self) -> List[Node]:
        return [output._node for output in self.outputs]

    def __len__(self):
        return len(self.outputs)

    @classmethod
    def trace(cls, loss: Tensor) -> "Graph":
        """Collect every recorded op reachable from loss, in creation order"""
        seen = set()
        outputs = []
        stack = [loss]
        while stack:
            tensor = stack.pop()
            if tensor._node is None or id(tensor) in seen:
                continue
            seen.add(id(tensor))
            outputs.append(tensor)
            stack.extend(tensor._node.inputs)
        outputs.sort(key=lambda t: t._node.sequence)
        return cls(outputs)

    def backward(self, loss: Tensor):
        seed = np.ones_like(loss.values)
        if loss._node is None:
            if loss.requires_grad:
                loss.accumulate_grad(seed)
            return
        pending = {id(loss): seed}
        for output in reversed(self.outputs):
            gradient = pending.pop(id(output), None)
            if gradient is None:
                continue
            node = output._node
            input_grads = node.backward_rule(gradient)
            for tensor, tensor_grad in zip(node.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor._node is None:
                    tensor.accumulate_grad(tensor_grad)
                else:
                    key = id(tensor)
                    pending[key] = pending[key] + tensor_grad if key in pending else tensor_grad


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf"""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    Graph.trace(loss).backward(loss)


# CONSTRUCTION HELPERS
def tensor(values, requires_grad: bool = False, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def detach(x: Tensor) -> Tensor:
    return x.detach()


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _record(op: str, values: np.ndarray, inputs: Tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(np.asarray(values))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, rule, next(_sequence))
    return out


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    normalized = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")
        normalized.append(a % ndim)
    return tuple(sorted(set(normalized)))


def _expand_reduced(gradient: np.ndarray, shape, axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        gradient = np.expand_dims(gradient, axes) if axes else gradient
    return np.broadcast_to(gradient, shape)


def _binary_operands(a, b, op: str) -> Tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else DEFAULT_DTYPE)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} differ; only scalar operands broadcast, "
            "reshape or broadcast_to explicitly"
        )
    return a, b


def _reduce_to(gradient: np.ndarray, target: Tensor) -> np.ndarray:
    if gradient.shape == target.shape:
        return gradient
    return np.asarray(gradient.sum(), dtype=target.dtype).reshape(target.shape)


# ELEMENTWISE OPS
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def rule(g):
        return _reduce_to(g, a), _reduce_to(g, b)
    return _record("add", a.values + b.values, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def rule(g):
        return _reduce_to(g, a), _reduce_to(-g, b)
    return _record("sub", a.values - b.values, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def rule(g):
        return _reduce_to(g * b.values, a), _reduce_to(g * a.values, b)
    return _record("mul", a.values * b.values, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.values / b.values

    def rule(g):
        return _reduce_to(g / b.values, a), _reduce_to(-g * out / b.values, b)
    return _record("div", out, (a, b), rule)


def neg(x: Tensor) -> Tensor:
    return _record("neg", -x.values, (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _record("relu", np.where(mask, x.values, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise DomainError(f"log of non-positive value (min {x.values.min()!r})")
    return _record("log", np.log(x.values), (x,), lambda g: (g / x.values,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.values < 0):
        raise DomainError(f"sqrt of negative value (min {x.values.min()!r})")
    out = np.sqrt(x.values)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return _record("square", x.values * x.values, (x,), lambda g: (2.0 * g * x.values,))


# REDUCTIONS
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.values, axis=axes, keepdims=keepdims)
    return _record("sum", out, (x,), lambda g: (_expand_reduced(g, x.shape, axes, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.values, axis=axes, keepdims=keepdims)
    return _record("mean", out, (x,), lambda g: (_expand_reduced(g / count, x.shape, axes, keepdims),))


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = np.max(x.values, axis=axes, keepdims=keepdims)

    def rule(g):
        # ties share the gradient equally
        winners = x.values == _expand_reduced(out, x.shape, axes, keepdims)
        share = (winners / np.sum(winners, axis=axes, keepdims=True)).astype(x.dtype)
        return (_expand_reduced(g, x.shape, axes, keepdims) * share,)
    return _record("max", out, (x,), rule)


# SHAPE OPS
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(x.values, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None

    def rule(g):
        lead = len(shape) - x.ndim
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        stretched = tuple(i for i, size in enumerate(x.shape) if size == 1 and g.shape[i] != 1)
        if stretched:
            g = g.sum(axis=stretched, keepdims=True)
        return (g,)
    return _record("broadcast_to", out, (x,), rule)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows along the first axis"""
    index = np.asarray(indices, dtype=np.int64)

    def rule(g):
        full = np.zeros_like(x.values)
        np.add.at(full, index, g)
        return (full,)
    return _record("take", x.values[index], (x,), rule)


# LINEAR ALGEBRA
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def rule(g):
        return g @ b.values.T, a.values.T @ g
    return _record("matmul", a.values @ b.values, (a, b), rule)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul of (n, m, k) by (n, k, p)"""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")

    def rule(g):
        return g @ np.swapaxes(b.values, 1, 2), np.swapaxes(a.values, 1, 2) @ g
    return _record("bmm", a.values @ b.values, (a, b), rule)


def bias_add(x: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias {bias.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = bias.shape[0]
    others = tuple(i for i in range(x.ndim) if i != axis)

    def rule(g):
        return g, g.sum(axis=others)
    return _record("bias_add", x.values + bias.values.reshape(view), (x, bias), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    weights = np.exp(shifted)
    out = weights / np.sum(weights, axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return _record("softmax", out, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)
    return _record("log_softmax", out, (x,), rule)


# CONVOLUTION
def _per_axis(value: IntOrTuple, count: int, label: str) -> Tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * count
    value = tuple(int(v) for v in value)
    if len(value) != count:
        raise ContractError(f"{label} needs {count} entries, got {value}")
    return value


def _im2col(xt: np.ndarray, k_shape: Tuple[int, ...], stride: Tuple[int, ...],
            out_shape: Tuple[int, ...]) -> np.ndarray:
    """Gather a padded (Cin, N, *spatial) array into contiguous (Cin, *k, N, *out) columns"""
    columns = np.empty(xt.shape[:1] + tuple(k_shape) + xt.shape[1:2] + tuple(out_shape), dtype=xt.dtype)
    for offset in np.ndindex(*k_shape):
        target = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))
        columns[(slice(None),) + offset] = xt[(slice(None), slice(None)) + target]
    return columns


def _col2im(columns: np.ndarray, padded_shape: Tuple[int, ...], k_shape: Tuple[int, ...],
            stride: Tuple[int, ...], out_shape: Tuple[int, ...]) -> np.ndarray:
    """Scatter-add (Cin, *k, N, *out) columns back onto a padded (Cin, N, *spatial) array"""
    grad = np.zeros(padded_shape, dtype=columns.dtype)
    for offset in np.ndindex(*k_shape):
        target = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))
        grad[(slice(None), slice(None)) + target] += columns[(slice(None),) + offset]
    return grad


def _convnd(x: Tensor, kernel: Tensor, bias: Optional[Tensor], pad: IntOrTuple, stride: IntOrTuple,
            dims: int) -> Tensor:
    """Cross-correlation over the trailing `dims` axes of an (N, Cin, *spatial) input"""
    name = f"conv{dims}d"
    if x.ndim != dims + 2 or kernel.ndim != dims + 2:
        raise DimensionError(f"{name}: input {x.shape} and kernel {kernel.shape} must both be {dims + 2}-d")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"{name}: input channels {x.shape[1]} != kernel channels {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"{name}: bias {bias.shape} does not match {kernel.shape[0]} output channels")
    pad = _per_axis(pad, dims, "pad")
    stride = _per_axis(stride, dims, "stride")
    if any(s < 1 for s in stride):
        raise ContractError(f"{name}: stride must be >= 1, got {stride}")
    if any(p < 0 for p in pad):
        raise ContractError(f"{name}: pad must be >= 0, got {pad}")

    k_shape = kernel.shape[2:]
    padded = tuple(extent + 2 * p for extent, p in zip(x.shape[2:], pad))
    for extent, k, s in zip(padded, k_shape, stride):
        if k > extent:
            raise ShapeError(f"{name}: kernel {k_shape} exceeds padded input {padded}")
        if (extent - k) % s:
            raise ShapeError(f"{name}: non-integral output extent for padded {padded}, kernel {k_shape}, stride {stride}")
    out_shape = tuple((extent - k) // s + 1 for extent, k, s in zip(padded, k_shape, stride))

    batch, c_out = x.shape[0], kernel.shape[0]
    # channel-major layout keeps every column write a contiguous block copy
    xt = np.pad(np.swapaxes(x.values, 0, 1), [(0, 0), (0, 0)] + [(p, p) for p in pad])
    positions = batch * int(np.prod(out_shape))
    columns = _im2col(xt, k_shape, stride, out_shape).reshape(-1, positions)
    weights = kernel.values.reshape(c_out, -1)
    rows = weights @ columns
    if bias is not None:
        rows += bias.values.reshape(-1, 1)
    out = np.ascontiguousarray(np.swapaxes(rows.reshape((c_out, batch) + out_shape), 0, 1))
    # oversized columns are rebuilt during backward instead of living on the tape
    cached = columns if columns.nbytes <= COLUMN_CACHE_BYTES else None
    del columns

    def rule(g):
        columns = cached if cached is not None else _im2col(xt, k_shape, stride, out_shape).reshape(-1, positions)
        g_rows = np.ascontiguousarray(np.swapaxes(g, 0, 1)).reshape(c_out, -1)
        grad_kernel = (g_rows @ columns.T).reshape(kernel.shape)
        grad_bias = g_rows.sum(axis=1) if bias is not None else None
        grad_input = None
        if x.requires_grad:
            grad_columns = (weights.T @ g_rows).reshape(xt.shape[:1] + k_shape + (batch,) + out_shape)
            grad_padded = _col2im(grad_columns, xt.shape, k_shape, stride, out_shape)
            crop = tuple(slice(p, p + extent) for p, extent in zip(pad, x.shape[2:]))
            grad_input = np.swapaxes(grad_padded[(slice(None), slice(None)) + crop], 0, 1)
        if bias is None:
            return grad_input, grad_kernel
        return grad_input, grad_kernel, grad_bias

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(name, out.astype(x.dtype, copy=False), inputs, rule)


def conv3d(input: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, pad: IntOrTuple = 0,
           stride: IntOrTuple = 1) -> Tensor:
    """3D cross-correlation of N x Cin x D x H x W by Cout x Cin x kD x kH x kW"""
    return _convnd(input, kernel, bias, pad, stride, 3)


def conv2d(input: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, pad: IntOrTuple = 0,
           stride: IntOrTuple = 1) -> Tensor:
    """2D cross-correlation of N x Cin x H x W by Cout x Cin x kH x kW"""
    return _convnd(input, kernel, bias, pad, stride, 2)
