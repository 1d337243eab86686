#!/usr/bin/env python3
"""
Differentiable array core for atnbreak

A DiffArray wraps a float64 numpy array. Arrays created through a
ComputationRecord (``record.watch``) are tracked: every operation on them
appends an entry holding its inputs, its output node and a closure over the
activations its adjoint needs. ``backward`` walks the entries once in
reverse order and returns the gradient of a scalar loss for every watched
leaf.

Broadcasting is limited to scalar-vs-array and equal shapes. The few places
the model needs more (bias vectors, positional embeddings over a batch,
weight matrices over stacked operands) have dedicated ops with their own
adjoints: ``add_bias``, ``broadcast_leading`` and the 2-D right operand of
``matmul``.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import ComputationRecordError, ShapeError

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_K = 0.044715
LAYER_NORM_EPS = 1e-5

Scalar = Union[int, float]


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    values.setflags(write=False)
    return values


class DiffArray:
    """n-dimensional float64 array, optionally tracked by a ComputationRecord"""

    __slots__ = ("values", "node_id", "record")

    def __init__(
        self,
        values: np.ndarray,
        node_id: Optional[int] = None,
        record: Optional["ComputationRecord"] = None,
    ):
        self.values = _frozen(values)
        self.node_id = node_id
        self.record = record

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        """Writable copy of the values"""
        return np.array(self.values)

    def __repr__(self) -> str:
        tag = f"node={self.node_id}" if self.tracked else "const"
        return f"DiffArray(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


ArrayLike = Union[DiffArray, np.ndarray, Scalar]


def constant(values) -> DiffArray:
    """Untracked array (parameters, clean-pass targets, images)"""
    if isinstance(values, DiffArray):
        return DiffArray(values.values)
    return DiffArray(np.array(values, dtype=np.float64))


def as_diff(value: ArrayLike) -> DiffArray:
    if isinstance(value, DiffArray):
        return value
    return constant(value)


@dataclass
class _Entry:
    kind: str
    inputs: Tuple[Optional[int], ...]
    output: int
    adjoint: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Gradients(dict):
    """Gradient map keyed by node id; also accepts the DiffArray itself"""

    def __getitem__(self, key):
        if isinstance(key, DiffArray):
            if key.node_id is None:
                raise ComputationRecordError("Constant arrays carry no gradient")
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, DiffArray):
            key = key.node_id
        return super().__contains__(key)


class ComputationRecord:
    """
    Ordered record of operations for one forward pass

    Single writer: each attack or training step owns its record. The record
    is consumed by ``backward`` and cannot be replayed.
    """

    def __init__(self):
        self._entries: List[_Entry] = []
        self._leaves: Dict[int, Tuple[int, ...]] = {}
        self._leaf_names: Dict[int, str] = {}
        self._next_id = 0
        self._consumed = False

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def consumed(self) -> bool:
        return self._consumed

    @property
    def kinds(self) -> List[str]:
        return [entry.kind for entry in self._entries]

    def _new_id(self) -> int:
        if self._consumed:
            raise ComputationRecordError("Record already consumed by backward()")
        node_id = self._next_id
        self._next_id += 1
        return node_id

    def watch(self, values, name: Optional[str] = None) -> DiffArray:
        """Register a leaf whose gradient backward() should return"""
        values = values.values if isinstance(values, DiffArray) else values
        node_id = self._new_id()
        leaf = DiffArray(np.array(values, dtype=np.float64), node_id, self)
        self._leaves[node_id] = leaf.shape
        if name is not None:
            self._leaf_names[node_id] = name
        return leaf

    def append(
        self,
        kind: str,
        inputs: Sequence[DiffArray],
        values: np.ndarray,
        adjoint: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> DiffArray:
        node_id = self._new_id()
        self._entries.append(
            _Entry(kind, tuple(a.node_id for a in inputs), node_id, adjoint)
        )
        return DiffArray(values, node_id, self)

    def backward(self, loss: DiffArray) -> Gradients:
        """
        Reverse pass from a scalar loss

        Args:
            loss: Scalar DiffArray produced on this record

        Returns:
            Gradients for every watched leaf (zeros where unreachable)
        """
        if self._consumed:
            raise ComputationRecordError("Record already consumed by backward()")
        if loss.size != 1 or loss.ndim > 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.record is not self or loss.node_id is None:
            raise ComputationRecordError("Loss node is not part of this record")

        pending: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}

        for entry in reversed(self._entries):
            grad_out = pending.pop(entry.output, None)
            if grad_out is None:
                continue
            input_grads = entry.adjoint(grad_out)
            for input_id, grad in zip(entry.inputs, input_grads):
                if input_id is None or grad is None:
                    continue
                if input_id in pending:
                    pending[input_id] = pending[input_id] + grad
                else:
                    pending[input_id] = grad

        grads = Gradients()
        for leaf_id, shape in self._leaves.items():
            grad = pending.get(leaf_id)
            grads[leaf_id] = np.zeros(shape) if grad is None else np.asarray(grad)

        self._entries = []
        self._consumed = True
        return grads

    def leaf_name(self, node_id: int) -> Optional[str]:
        return self._leaf_names.get(node_id)


def backward(record: ComputationRecord, loss: DiffArray) -> Gradients:
    """Module-level alias of ComputationRecord.backward"""
    return record.backward(loss)


def _emit(
    kind: str,
    inputs: Sequence[DiffArray],
    values: np.ndarray,
    adjoint: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> DiffArray:
    records = {id(a.record): a.record for a in inputs if a.tracked}
    if not records:
        return DiffArray(values)
    if len(records) > 1:
        raise ComputationRecordError(f"{kind}: operands belong to different records")
    record = next(iter(records.values()))
    return record.append(kind, inputs, values, adjoint)


def _sum_to_shape(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_pair(kind: str, a: DiffArray, b: DiffArray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _check_pair("add", a, b)

    def adjoint(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _emit("add", (a, b), a.values + b.values, adjoint)


def sub(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _check_pair("sub", a, b)

    def adjoint(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _emit("sub", (a, b), a.values - b.values, adjoint)


def mul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _check_pair("mul", a, b)
    av, bv = a.values, b.values

    def adjoint(g):
        return _sum_to_shape(g * bv, a.shape), _sum_to_shape(g * av, b.shape)

    return _emit("mul", (a, b), av * bv, adjoint)


def scale(a: ArrayLike, factor: float) -> DiffArray:
    a = as_diff(a)
    factor = float(factor)

    def adjoint(g):
        return (g * factor,)

    return _emit("scale", (a,), a.values * factor, adjoint)


def neg(a: ArrayLike) -> DiffArray:
    return scale(a, -1.0)


def square(a: ArrayLike) -> DiffArray:
    a = as_diff(a)
    av = a.values

    def adjoint(g):
        return (2.0 * av * g,)

    return _emit("square", (a,), av * av, adjoint)


def sqrt(a: ArrayLike) -> DiffArray:
    """Square root; the gradient is defined as zero where the output is zero"""
    a = as_diff(a)
    out = np.sqrt(a.values)

    def adjoint(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return _emit("sqrt", (a,), out, adjoint)


def gelu(a: ArrayLike) -> DiffArray:
    """GELU, tanh form: 0.5 x (1 + tanh(c (x + k x^3))), c = sqrt(2/pi), k = 0.044715"""
    a = as_diff(a)
    x = a.values
    inner = GELU_C * (x + GELU_K * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def adjoint(g):
        d_inner = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * local,)

    return _emit("gelu", (a,), out, adjoint)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}
_ELEMENTWISE_UNARY = {"gelu": gelu, "square": square, "sqrt": sqrt, "neg": neg}


def elementwise(kind: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> DiffArray:
    """Dispatch by kind: add | sub | mul | scale | gelu | square | sqrt | neg"""
    if kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return _ELEMENTWISE_BINARY[kind](a, b)
    if kind == "scale":
        if not isinstance(b, (int, float)):
            raise ShapeError("scale needs a Python scalar factor")
        return scale(a, b)
    if kind in _ELEMENTWISE_UNARY:
        return _ELEMENTWISE_UNARY[kind](a)
    raise ValueError(f"Unknown elementwise kind: {kind}")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    """
    Matrix product

    a: [..., m, k], b: [..., k, n] with equal leading extents, or b: [k, n]
    shared across every leading index of a.
    """
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} and {b.shape}"
        )
    shared_rhs = b.ndim == 2
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul leading extents differ: {a.shape} and {b.shape}"
        )
    av, bv = a.values, b.values

    def adjoint(g):
        grad_a = g @ np.swapaxes(bv, -1, -2)
        if shared_rhs:
            k, n = bv.shape
            grad_b = av.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            grad_b = np.swapaxes(av, -1, -2) @ g
        return grad_a, grad_b

    return _emit("matmul", (a, b), av @ bv, adjoint)


def add_bias(a: ArrayLike, bias: ArrayLike) -> DiffArray:
    """a[..., n] + bias[n]"""
    a, bias = as_diff(a), as_diff(bias)
    if bias.ndim != 1 or a.ndim < 1 or a.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {a.shape} and {bias.shape}")
    n = bias.shape[0]

    def adjoint(g):
        return g, g.reshape(-1, n).sum(axis=0)

    return _emit("add_bias", (a, bias), a.values + bias.values, adjoint)


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> DiffArray:
    """x @ weight (+ bias), weight stored [in, out]"""
    out = matmul(x, weight)
    return out if bias is None else add_bias(out, bias)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def softmax_rows(a: ArrayLike) -> DiffArray:
    """Softmax over the trailing axis, stabilised by max-subtraction"""
    a = as_diff(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (a,), s, adjoint)


def layer_norm(
    a: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = LAYER_NORM_EPS
) -> DiffArray:
    """Per-row zero mean / unit variance over the trailing axis, then affine"""
    a, gain, bias = as_diff(a), as_diff(gain), as_diff(bias)
    d = a.shape[-1] if a.ndim else 0
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: input {a.shape} needs gain/bias of shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")

    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values
    out = xhat * gv + bias.values

    def adjoint(g):
        grad_gain = (g * xhat).reshape(-1, d).sum(axis=0)
        grad_bias = g.reshape(-1, d).sum(axis=0)
        gx = g * gv
        grad_x = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _emit("layer_norm", (a, gain, bias), out, adjoint)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalised = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        normalised.append(ax % ndim)
    return tuple(sorted(set(normalised)))


def _expand_grad(g: np.ndarray, axes: Tuple[int, ...], shape: Tuple[int, ...]):
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def reduce_sum(a: ArrayLike, axes=None) -> DiffArray:
    a = as_diff(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.values.sum(axis=axes)

    def adjoint(g):
        return (_expand_grad(g, axes, a.shape),)

    return _emit("sum", (a,), out, adjoint)


def reduce_mean(a: ArrayLike, axes=None) -> DiffArray:
    a = as_diff(a)
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.values.mean(axis=axes) if axes else np.array(a.values)

    def adjoint(g):
        return (_expand_grad(g, axes, a.shape) / count,)

    return _emit("mean", (a,), out, adjoint)


def l2norm(a: ArrayLike, axes=None) -> DiffArray:
    """sqrt(sum v^2); gradient v/|v|, defined as zero at the zero vector"""
    a = as_diff(a)
    axes = _norm_axes(axes, a.ndim)
    av = a.values
    out = np.sqrt((av * av).sum(axis=axes))

    def adjoint(g):
        norm = np.expand_dims(out, axes)
        safe = np.where(norm > 0.0, norm, 1.0)
        local = np.where(norm > 0.0, av / safe, 0.0)
        return (_expand_grad(g, axes, a.shape) * local,)

    return _emit("l2norm", (a,), out, adjoint)


def reduce(a: ArrayLike, kind: str, axes=None) -> DiffArray:
    """Dispatch by kind: sum | mean | l2norm"""
    if kind == "sum":
        return reduce_sum(a, axes)
    if kind == "mean":
        return reduce_mean(a, axes)
    if kind == "l2norm":
        return l2norm(a, axes)
    raise ValueError(f"Unknown reduction kind: {kind}")


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def reshape(a: ArrayLike, shape: Sequence[int]) -> DiffArray:
    a = as_diff(a)
    try:
        out = a.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")

    def adjoint(g):
        return (g.reshape(a.shape),)

    return _emit("reshape", (a,), out, adjoint)


def transpose(a: ArrayLike, axes: Sequence[int]) -> DiffArray:
    a = as_diff(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))

    def adjoint(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", (a,), np.transpose(a.values, axes), adjoint)


def index(a: ArrayLike, key) -> DiffArray:
    """Basic indexing (ints and slices)"""
    a = as_diff(a)
    if not isinstance(key, tuple):
        key = (key,)
    for part in key:
        if not isinstance(part, (int, slice, type(Ellipsis))):
            raise ShapeError("index supports ints, slices and Ellipsis only")
    out = np.array(a.values[key])

    def adjoint(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _emit("index", (a,), out, adjoint)


def concat(arrays: Sequence[ArrayLike], axis: int = 0) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    if not arrays:
        raise ShapeError("concat needs at least one array")
    try:
        out = np.concatenate([x.values for x in arrays], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[x.shape for x in arrays]} on axis {axis}"
        )
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", arrays, out, adjoint)


def broadcast_leading(a: ArrayLike, leading: Sequence[int]) -> DiffArray:
    """Replicate a over new leading axes: [*leading, *a.shape]"""
    a = as_diff(a)
    leading = tuple(int(n) for n in leading)
    out = np.broadcast_to(a.values, leading + a.shape).copy()
    lead_axes = tuple(range(len(leading)))

    def adjoint(g):
        return (g.sum(axis=lead_axes) if lead_axes else g,)

    return _emit("broadcast_leading", (a,), out, adjoint)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: ArrayLike, labels) -> DiffArray:
    """
    Mean negative log-likelihood of integer labels under softmax(logits)

    Args:
        logits: [..., C]
        labels: integer array matching logits.shape[:-1]

    Returns:
        Scalar DiffArray
    """
    logits = as_diff(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}"
        )
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"cross_entropy: labels outside [0, {n_classes})")

    flat = logits.values.reshape(-1, n_classes)
    flat_labels = labels.reshape(-1)
    count = max(flat.shape[0], 1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(flat.shape[0])
    loss = -log_probs[rows, flat_labels].sum() / count

    def adjoint(g):
        probs = np.exp(log_probs)
        probs[rows, flat_labels] -= 1.0
        return ((probs * (float(g) / count)).reshape(logits.shape),)

    return _emit("cross_entropy", (logits,), np.asarray(loss), adjoint)
