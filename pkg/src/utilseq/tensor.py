"""Reverse-mode automatic differentiation over double-precision arrays.

A :class:`Tape` records operations in execution order; gradients
propagate in reverse append order, so no explicit topological sort is
needed.  Array storage and kernels are numpy; the tape, operation set,
and backward rules live here.

Every operation validates that its result is finite - a NaN or Inf
anywhere raises :class:`~utilseq.errors.NumericError` at the op that
produced it, which keeps training failures attributable.

Broadcasting is deliberately narrow: scalar-with-tensor and adding a
row vector to a matrix (bias addition).  Anything else is a shape error.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError

Array = np.ndarray
BackwardFn = Callable[[Array], tuple[tuple[int | None, Array], ...]]


def _check_finite(value: Array, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite result from {op}")


class Tape:
    """Append-only operation record; acyclic by construction."""

    def __init__(self):
        self._backward_fns: list[BackwardFn | None] = []

    def __len__(self) -> int:
        return len(self._backward_fns)

    def record(self, value: Array, backward_fn: BackwardFn | None) -> "Tensor":
        node = len(self._backward_fns)
        self._backward_fns.append(backward_fn)
        return Tensor(value, tape=self, node=node)

    def leaf(self, data: Array) -> "Tensor":
        """Register an input (e.g. a parameter) for gradient tracking."""
        return self.record(np.asarray(data, dtype=np.float64), None)


class Tensor:
    """A double-precision array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.node is not None})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise DomainError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(tape: Tape | None, value: Array, backward_fn: BackwardFn) -> Tensor:
    if tape is None:
        return Tensor(value)
    return tape.record(value, backward_fn)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_add_shapes(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise DomainError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# Elementwise and scalar ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_add_shapes(a, b, "add")
    value = a.data + b.data
    _check_finite(value, "add")
    av_shape, bv_shape = a.shape, b.shape

    def backward_fn(g):
        return ((a.node, _unbroadcast(g, av_shape)), (b.node, _unbroadcast(g, bv_shape)))

    return _emit(_tape_of(a, b), value, backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_add_shapes(a, b, "sub")
    value = a.data - b.data
    _check_finite(value, "sub")
    av_shape, bv_shape = a.shape, b.shape

    def backward_fn(g):
        return ((a.node, _unbroadcast(g, av_shape)), (b.node, _unbroadcast(-g, bv_shape)))

    return _emit(_tape_of(a, b), value, backward_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    value = -a.data

    def backward_fn(g):
        return ((a.node, -g),)

    return _emit(_tape_of(a), value, backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not (a.shape == b.shape or a.shape == () or b.shape == ()):
        raise DomainError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    value = a.data * b.data
    _check_finite(value, "mul")
    av, bv = a.data, b.data

    def backward_fn(g):
        return (
            (a.node, _unbroadcast(g * bv, av.shape)),
            (b.node, _unbroadcast(g * av, bv.shape)),
        )

    return _emit(_tape_of(a, b), value, backward_fn)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors as a single node."""
    if not tensors:
        raise DomainError("add_n of an empty list")
    tensors = [_as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise DomainError("add_n requires matching shapes")
    value = tensors[0].data.copy()
    for t in tensors[1:]:
        value += t.data
    _check_finite(value, "add_n")

    def backward_fn(g):
        return tuple((t.node, g) for t in tensors)

    return _emit(_tape_of(*tensors), value, backward_fn)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DomainError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    value = a.data @ b.data
    _check_finite(value, "matmul")
    av, bv = a.data, b.data

    def backward_fn(g):
        return ((a.node, g @ bv.T), (b.node, av.T @ g))

    return _emit(_tape_of(a, b), value, backward_fn)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DomainError("transpose expects a 2-d tensor")
    value = a.data.T.copy()

    def backward_fn(g):
        return ((a.node, g.T),)

    return _emit(_tape_of(a), value, backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("concat of an empty list")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    _check_finite(value, "concat")
    sizes = [t.shape[axis] for t in tensors]

    def backward_fn(g):
        out = []
        offset = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            out.append((t.node, g[tuple(index)]))
            offset += size
        return tuple(out)

    return _emit(_tape_of(*tensors), value, backward_fn)


def slice2d(a: Tensor, rows: slice, cols: slice) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DomainError("slice2d expects a 2-d tensor")
    value = a.data[rows, cols].copy()
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return ((a.node, full),)

    return _emit(_tape_of(a), value, backward_fn)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    table = _as_tensor(table)
    if table.ndim != 2:
        raise DomainError("embedding table must be 2-d")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise DomainError("embedding ids must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError("embedding id out of range")
    value = table.data[idx]
    shape = table.shape

    def backward_fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return ((table.node, full),)

    return _emit(_tape_of(table), value, backward_fn)


def gather_cols(a: Tensor, ids: Sequence[int]) -> Tensor:
    """Pick one column per row: out[t] = a[t, ids[t]]."""
    a = _as_tensor(a)
    idx = np.asarray(ids, dtype=np.intp)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise DomainError("gather_cols expects a 2-d tensor and one id per row")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise DomainError("gather_cols id out of range")
    rows = np.arange(a.shape[0])
    value = a.data[rows, idx].copy()
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return ((a.node, full),)

    return _emit(_tape_of(a), value, backward_fn)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    value = exps / exps.sum(axis=axis, keepdims=True)
    _check_finite(value, "softmax")

    def backward_fn(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        return ((a.node, value * (g - inner)),)

    return _emit(_tape_of(a), value, backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse
    _check_finite(value, "log_softmax")

    def backward_fn(g):
        return ((a.node, g - np.exp(value) * g.sum(axis=axis, keepdims=True)),)

    return _emit(_tape_of(a), value, backward_fn)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.data)
    _check_finite(value, "log")
    av = a.data

    def backward_fn(g):
        return ((a.node, g / av),)

    return _emit(_tape_of(a), value, backward_fn)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    _check_finite(value, "exp")

    def backward_fn(g):
        return ((a.node, g * value),)

    return _emit(_tape_of(a), value, backward_fn)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    value = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def backward_fn(g):
        return ((a.node, g * mask),)

    return _emit(_tape_of(a), value, backward_fn)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a exceeds the floor."""
    a = _as_tensor(a)
    value = np.maximum(a.data, floor)
    mask = a.data > floor

    def backward_fn(g):
        return ((a.node, g * mask),)

    return _emit(_tape_of(a), value, backward_fn)


# ---------------------------------------------------------------------------
# Reductions and normalization
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    value = np.asarray(a.data.sum())
    _check_finite(value, "sum")
    shape = a.shape

    def backward_fn(g):
        return ((a.node, np.broadcast_to(g, shape).copy()),)

    return _emit(_tape_of(a), value, backward_fn)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    size = a.data.size
    if size == 0:
        raise DomainError("mean of an empty tensor")
    value = np.asarray(a.data.mean())
    _check_finite(value, "mean")
    shape = a.shape

    def backward_fn(g):
        return ((a.node, np.broadcast_to(g / size, shape).copy()),)

    return _emit(_tape_of(a), value, backward_fn)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DomainError("sum_axis expects a 2-d tensor")
    value = a.data.sum(axis=axis)
    _check_finite(value, "sum_axis")
    shape = a.shape

    def backward_fn(g):
        return ((a.node, np.broadcast_to(np.expand_dims(g, axis), shape).copy()),)

    return _emit(_tape_of(a), value, backward_fn)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DomainError("mean_axis expects a 2-d tensor")
    n = a.shape[axis]
    value = a.data.mean(axis=axis)
    _check_finite(value, "mean_axis")
    shape = a.shape

    def backward_fn(g):
        return ((a.node, np.broadcast_to(np.expand_dims(g / n, axis), shape).copy()),)

    return _emit(_tape_of(a), value, backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization with learned gain and bias over the last axis."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DomainError("layer_norm expects (S, E) input with (E,) gain and bias")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    value = xhat * gain.data + bias.data
    _check_finite(value, "layer_norm")
    gv = gain.data

    def backward_fn(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        dxhat = g * gv
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return ((x.node, dx), (gain.node, dgain), (bias.node, dbias))

    return _emit(_tape_of(x, gain, bias), value, backward_fn)


class DropoutStream:
    """Counter-based mask source so dropout is reproducible per step."""

    def __init__(self, *key: int):
        self.key = tuple(int(k) % (2**63) for k in key)
        self.counter = 0

    def mask(self, shape: tuple[int, ...], rate: float) -> Array:
        rng = np.random.default_rng([*self.key, self.counter])
        self.counter += 1
        keep = rng.random(shape) >= rate
        return keep.astype(np.float64) / (1.0 - rate)


def dropout(a: Tensor, rate: float, stream: DropoutStream | None, training: bool) -> Tensor:
    """Inverted dropout; exact identity outside training."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise DomainError("dropout rate must be in [0, 1)")
    if stream is None:
        raise DomainError("training-mode dropout needs a DropoutStream")
    a = _as_tensor(a)
    mask = stream.mask(a.shape, rate)
    value = a.data * mask

    def backward_fn(g):
        return ((a.node, g * mask),)

    return _emit(_tape_of(a), value, backward_fn)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


class Gradients:
    """Gradient per tape node; off-path tensors report zeros."""

    def __init__(self, grads: list[Array | None]):
        self._grads = grads

    def wrt(self, tensor: Tensor) -> Array:
        if tensor.node is None or tensor.node >= len(self._grads):
            return np.zeros_like(tensor.data)
        g = self._grads[tensor.node]
        return np.zeros_like(tensor.data) if g is None else g


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(node) through the tape in reverse append order."""
    if loss.tape is not tape or loss.node is None:
        raise DomainError("loss is not recorded on this tape")
    if loss.shape != ():
        raise DomainError("loss must be a scalar")
    grads: list[Array | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones(())
    for node in range(loss.node, -1, -1):
        g = grads[node]
        if g is None:
            continue
        fn = tape._backward_fns[node]
        if fn is None:
            continue
        for input_node, contribution in fn(g):
            if input_node is None:
                continue
            if grads[input_node] is None:
                grads[input_node] = np.array(contribution, dtype=np.float64)
            else:
                grads[input_node] = grads[input_node] + contribution
    return Gradients(grads)
