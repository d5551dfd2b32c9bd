"""Reverse-mode automatic differentiation over numpy arrays.

The model code in this package is small enough that a hand-rolled tape
is both simpler and easier to audit than a framework dependency.  Every
differentiable operation records its parents and a closure computing
parent gradients from the output gradient; ``Tensor.backward`` walks the
recorded graph once in reverse topological order.

Arrays are float32 by default.  A float64 mode (pass ``dtype=np.float64``
at the leaves) exists for gradient checks, where finite differences need
the extra precision; forward results are otherwise identical bit layouts
per dtype.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ParameterError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# Module-level switch; ops recorded only while True.  Eval passes run
# inside no_grad() to keep memory flat.
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array node in the gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run reverse-mode accumulation from this (scalar) tensor."""
        build_graph(self).backward()

    # Operator sugar; all routing through the module-level ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"


class GradGraph:
    """Topologically sorted view of the tensors reachable from a root."""

    def __init__(self, root: Tensor, nodes: list[Tensor]):
        self.root = root
        self.nodes = nodes  # topological order, root last

    def backward(self) -> None:
        root = self.root
        if root.data.ndim != 0 and root.data.size != 1:
            raise ContractError(
                f"backward requires a scalar root, got shape {root.shape}"
            )
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def build_graph(root: Tensor) -> GradGraph:
    """Collect requires-grad nodes reachable from root, in topo order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return GradGraph(root, order)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:  # mismatched batch dims
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc
    return _make(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ParameterError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    dim = a.shape[axis]
    if start < 0 or length < 0 or start + length > dim:
        raise ParameterError(
            f"narrow range [{start}, {start + length}) outside axis of size {dim}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _make(a.data[index].copy(), (a,), backward, "narrow")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along an axis with a 1-d integer index."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ParameterError(f"take expects a 1-d index, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ParameterError(
            f"take index out of range for axis of size {a.shape[axis]}"
        )

    def backward(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def take_per_row(a: Tensor, indices) -> Tensor:
    """Gather along axis 1 with a per-row index: [B, N, ...] x [B, M] -> [B, M, ...]."""
    idx = np.asarray(indices)
    if a.ndim < 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(
            f"take_per_row expects [B, N, ...] data and [B, M] indices, got {a.shape} and {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ParameterError(
            f"take_per_row index out of range for axis of size {a.shape[1]}"
        )
    expanded = idx.reshape(idx.shape + (1,) * (a.ndim - 2))
    rows = np.arange(a.shape[0])[:, None]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _make(np.take_along_axis(a.data, expanded, axis=1), (a,), backward, "take_per_row")


def pick(a: Tensor, indices) -> Tensor:
    """Select one column per row: [N, C] x [N] -> [N]."""
    idx = np.asarray(indices)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(
            f"pick expects [N, C] data and [N] indices, got {a.shape} and {idx.shape}"
        )
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _make(a.data[rows, idx], (a,), backward, "pick")


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _normalize_axis(axis, a.ndim)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).astype(a.data.dtype, copy=True),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _normalize_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))

    def backward(g):
        expanded = _expand_reduced(g, a.shape, axis, keepdims)
        return ((expanded / count).astype(a.data.dtype, copy=False),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _make(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * out_data),)

    return _make(out_data, (a,), backward, "sqrt")


def square(a: Tensor) -> Tensor:
    def backward(g):
        return (g * 2.0 * a.data,)

    return _make(a.data * a.data, (a,), backward, "square")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (a,), backward, "softmax")


def log_sum_exp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(x))) along one axis, fused for a clean gradient."""
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    total = e.sum(axis=axis, keepdims=True)
    out = np.log(total) + m
    soft = e / total
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (soft * gk,)

    return _make(out, (a,), backward, "log_sum_exp")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    dim = a.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {dim}"
        )
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.data.dtype))
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        ggamma = (g * xhat).sum(axis=tuple(range(a.ndim - 1)))
        gbeta = g.sum(axis=tuple(range(a.ndim - 1)))
        mean_g = gxhat.mean(axis=-1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (gxhat - mean_g - xhat * mean_gx)
        return gx.astype(a.data.dtype, copy=False), ggamma, gbeta

    return _make(out, (a, gamma, beta), backward, "layer_norm")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data * np.asarray(_INV_SQRT2, dtype=a.data.dtype)))
    out = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * np.asarray(_INV_SQRT_2PI, dtype=a.data.dtype)
        return (g * (cdf + a.data * pdf),)

    return _make(out, (a,), backward, "gelu")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes disagree: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return tensor_mean(square(diff))


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale rows to unit Euclidean norm (graph-recorded)."""
    norms = sqrt(tensor_sum(square(a), axis=axis, keepdims=True) + eps)
    return div(a, norms)


def accumulate_parameter_grads(loss: Tensor) -> None:
    """Convenience wrapper; mirrors Tensor.backward for call-site clarity."""
    loss.backward()


__all__ = [
    "Tensor",
    "GradGraph",
    "build_graph",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "narrow",
    "take",
    "take_per_row",
    "pick",
    "tensor_sum",
    "tensor_mean",
    "exp",
    "log",
    "sqrt",
    "square",
    "softmax",
    "log_sum_exp",
    "layer_norm",
    "gelu",
    "mse",
    "l2_normalize",
]
