"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every real-valued quantity in the pipeline (adjacency weights, embeddings,
mask logits, losses) lives in a :class:`Tensor`. Ops execute eagerly on
numpy arrays; when a :class:`ComputationTape` is active on the current
thread they also append a backward closure to it. ``backward`` replays the
tape once in reverse execution order, which is a valid reverse topological
order, so every node's cotangent is complete before its own closure runs.

A tape and the intermediates recorded on it are confined to one thread and
one forward/backward pass. Leaf tensors (weights) accumulate into ``grad``
across passes until explicitly zeroed. Tensors built under one tape must
not be fed into ops recorded on a different tape; ``detach`` first.
"""

from __future__ import annotations

import threading
from collections.abc import Sequence
from functools import lru_cache

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "no_grad",
    "backward",
    "ShapeError",
    "NumericDomainError",
    "EmptyReductionError",
    "elementwise",
    "reduce",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "rsqrt",
    "sigmoid",
    "softplus",
    "relu",
    "leaky_relu",
    "matmul",
    "transpose",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "tensor_max",
    "take_index",
    "take_row",
    "slice_rows",
    "concat",
    "tile_rows",
    "tile_cols",
    "symmetrize_upper",
    "logsumexp",
    "log_softmax",
    "softmax",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericDomainError(ArithmeticError):
    """Value outside an operation's numeric domain (e.g. log of <= 0)."""


class EmptyReductionError(ValueError):
    """Reduction over an empty tensor."""


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape() -> "ComputationTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class ComputationTape:
    """Append-only record of executed differentiable ops.

    Recording order is execution order, hence a topological order of the
    value graph; one reversed sweep therefore visits each node exactly once
    with its output gradient fully accumulated.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "ComputationTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class no_grad:
    """Suppress recording inside the block; ops still compute values."""

    def __enter__(self) -> "no_grad":
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class Tensor:
    """A dense float64 array plus an optional same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
    tape = _active_tape()
    if tape is not None and any(_tracked(p) for p in parents):
        out._vjp = vjp
        tape.nodes.append(out)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad or t._vjp is not None:
        t.grad = g if t.grad is None else t.grad + g


def backward(scalar: Tensor) -> None:
    """Propagate d(scalar)/d(leaf) into every requiring leaf; clears the tape."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active ComputationTape")
    if scalar.data.size != 1:
        raise ShapeError(f"backward() needs a scalar, got shape {scalar.data.shape}")
    scalar.grad = np.ones_like(scalar.data)
    for node in reversed(tape.nodes):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)
            if not node.requires_grad:
                node.grad = None
    tape.nodes.clear()


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(
        f"{opname}: shapes {a.data.shape} and {b.data.shape} must match exactly "
        f"or one operand must be a scalar"
    )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data)

    def vjp(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    _record(out, (a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data)

    def vjp(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    _record(out, (a, b), vjp)
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data)

    def vjp(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    _record(out, (a, b), vjp)
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "div")
    out = Tensor(a.data / b.data)

    def vjp(g):
        _accum(a, _reduce_to(g / b.data, a.data.shape))
        _accum(b, _reduce_to(-g * out.data / b.data, b.data.shape))

    _record(out, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data)

    def vjp(g):
        _accum(a, -g)

    _record(out, (a,), vjp)
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.exp(a.data))

    def vjp(g):
        _accum(a, g * out.data)

    _record(out, (a,), vjp)
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NumericDomainError("log: argument has entries <= 0")
    out = Tensor(np.log(a.data))

    def vjp(g):
        _accum(a, g / a.data)

    _record(out, (a,), vjp)
    return out


def rsqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NumericDomainError("rsqrt: argument has entries <= 0")
    out = Tensor(1.0 / np.sqrt(a.data))

    def vjp(g):
        _accum(a, -0.5 * g * out.data ** 3)

    _record(out, (a,), vjp)
    return out


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows; both branches reduce to it
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(_sigmoid_stable(a.data))

    def vjp(g):
        _accum(a, g * out.data * (1.0 - out.data))

    _record(out, (a,), vjp)
    return out


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.logaddexp(0.0, a.data))

    def vjp(g):
        _accum(a, g * _sigmoid_stable(a.data))

    _record(out, (a,), vjp)
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def vjp(g):
        _accum(a, g * (a.data > 0.0))

    _record(out, (a,), vjp)
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.where(a.data > 0.0, a.data, slope * a.data))

    def vjp(g):
        _accum(a, g * np.where(a.data > 0.0, 1.0, slope))

    _record(out, (a,), vjp)
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _record(out, (a, b), vjp)
    return out


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: operand must be 2-D, got {a.data.shape}")
    out = Tensor(a.data.T.copy())

    def vjp(g):
        _accum(a, g.T)

    _record(out, (a,), vjp)
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape).copy())

    def vjp(g):
        _accum(a, g.reshape(a.data.shape))

    _record(out, (a,), vjp)
    return out


def _check_reduction(a: Tensor, axis, opname: str) -> None:
    if a.data.size == 0:
        raise EmptyReductionError(f"{opname}: reduction over empty tensor of shape {a.data.shape}")
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"{opname}: axis {axis} out of range for shape {a.data.shape}")


def tensor_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    _check_reduction(a, axis, "sum")
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    _record(out, (a,), vjp)
    return out


def tensor_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    _check_reduction(a, axis, "mean")
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / n)

    _record(out, (a,), vjp)
    return out


def tensor_max(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient routes to the first maximal element."""
    a = _wrap(a)
    _check_reduction(a, axis, "max")
    out = Tensor(a.data.max(axis=axis, keepdims=keepdims))

    def vjp(g):
        z = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(int(a.data.argmax()), a.data.shape)
            z[idx] = g.reshape(()) if g.ndim else g
        else:
            idx = np.expand_dims(a.data.argmax(axis=axis), axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(z, idx, gg, axis=axis)
        _accum(a, z)

    _record(out, (a,), vjp)
    return out


def take_index(a, index: int) -> Tensor:
    """Extract one element by flat index as a 0-d tensor."""
    a = _wrap(a)
    flat = a.data.reshape(-1)
    if not 0 <= index < flat.size:
        raise ShapeError(f"take_index: index {index} out of range for size {flat.size}")
    out = Tensor(flat[index])

    def vjp(g):
        z = np.zeros_like(a.data)
        z.reshape(-1)[index] = g.reshape(()) if g.ndim else g
        _accum(a, z)

    _record(out, (a,), vjp)
    return out


def take_row(a, i: int) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_row: operand must be 2-D, got {a.data.shape}")
    out = Tensor(a.data[i : i + 1].copy())

    def vjp(g):
        z = np.zeros_like(a.data)
        z[i] = g[0]
        _accum(a, z)

    _record(out, (a,), vjp)
    return out


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_rows: operand must be 2-D, got {a.data.shape}")
    out = Tensor(a.data[start:stop].copy())

    def vjp(g):
        z = np.zeros_like(a.data)
        z[start:stop] = g
        _accum(a, z)

    _record(out, (a,), vjp)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        for p, piece in zip(parts, np.split(g, offsets, axis=axis)):
            _accum(p, piece)

    _record(out, tuple(parts), vjp)
    return out


def tile_rows(v, k: int) -> Tensor:
    """Repeat a (1, d) row vector into a (k, d) matrix."""
    v = _wrap(v)
    if v.data.ndim != 2 or v.data.shape[0] != 1:
        raise ShapeError(f"tile_rows: need shape (1, d), got {v.data.shape}")
    out = Tensor(np.broadcast_to(v.data, (k, v.data.shape[1])).copy())

    def vjp(g):
        _accum(v, g.sum(axis=0, keepdims=True))

    _record(out, (v,), vjp)
    return out


def tile_cols(v, k: int) -> Tensor:
    """Repeat an (n, 1) column vector into an (n, k) matrix."""
    v = _wrap(v)
    if v.data.ndim != 2 or v.data.shape[1] != 1:
        raise ShapeError(f"tile_cols: need shape (n, 1), got {v.data.shape}")
    out = Tensor(np.broadcast_to(v.data, (v.data.shape[0], k)).copy())

    def vjp(g):
        _accum(v, g.sum(axis=1, keepdims=True))

    _record(out, (v,), vjp)
    return out


@lru_cache(maxsize=64)
def _triu_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(n, k=1)
    return iu[0], iu[1]


def symmetrize_upper(v, n: int) -> Tensor:
    """Scatter n*(n-1)/2 upper-triangular values into a symmetric (n, n) matrix.

    Diagonal stays zero. The gradient of each value is the sum of its two
    mirrored positions.
    """
    v = _wrap(v)
    expect = n * (n - 1) // 2
    if v.data.ndim != 1 or v.data.size != expect:
        raise ShapeError(f"symmetrize_upper: need {expect} values for n={n}, got shape {v.data.shape}")
    rows, cols = _triu_pairs(n)
    m = np.zeros((n, n), dtype=np.float64)
    m[rows, cols] = v.data
    m[cols, rows] = v.data
    out = Tensor(m)

    def vjp(g):
        _accum(v, g[rows, cols] + g[cols, rows])

    _record(out, (v,), vjp)
    return out


def logsumexp(a) -> Tensor:
    """log(sum(exp(a))) over all elements, shifted by the (constant) max."""
    a = _wrap(a)
    m = float(a.data.max())
    return add(log(tensor_sum(exp(sub(a, m)))), m)


def log_softmax(a) -> Tensor:
    return sub(a, logsumexp(a))


def softmax(a) -> Tensor:
    return exp(log_softmax(a))


def cross_entropy(logits, label: int) -> Tensor:
    """Negative log softmax probability of ``label`` for a single logit vector."""
    return neg(take_index(log_softmax(logits), int(label)))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "neg": neg,
}

_REDUCE = {"sum": tensor_sum, "mean": tensor_mean, "max": tensor_max}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name: add, mul, sigmoid, relu, exp, log, neg."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"elementwise: unknown op {op!r}") from None
    return fn(*args)


def reduce(op: str, a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Dispatch a reduction by name: sum, mean, max."""
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"reduce: unknown op {op!r}") from None
    return fn(a, axis=axis, keepdims=keepdims)
