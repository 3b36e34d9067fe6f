"""Reverse-mode automatic differentiation over dense float64 tensors.

Operations record onto a ``Tape`` (a Wengert list): every op appends one
node, and each node's inputs were appended before it, so node ids are
topologically ordered by construction. ``backward`` replays the list once
in reverse, accumulating gradients additively across fan-out, then writes
them into the ``grad`` slot of every trainable leaf and releases the tape.

Tapes are created implicitly: the first recorded op whose inputs carry no
tape opens a fresh one, and trainable leaves bind to it on first use. A
tape must stay within a single thread; independent tapes may run in
parallel threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    InsufficientSamplesError,
    NumericError,
    ShapeError,
    StateError,
)

Array = np.ndarray

# Primitive node kinds that can appear on a tape.
OP_KINDS = (
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "relu",
    "square",
    "scale",
    "matmul",
    "transpose",
    "softmax",
    "topk_softmax",
    "sum",
    "mean",
    "var",
    "clamp_min",
    "row",
    "scale_columns",
    "pairwise_sqdist",
    "dropout",
    "cross_entropy",
)

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "exp", "log", "relu", "square", "scale")
REDUCE_KINDS = ("sum", "mean", "var")

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording for the enclosed block (current thread only)."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """Dense float64 array with an optional gradient slot and tape linkage.

    ``requires_grad`` marks trainable leaves; intermediate results are
    tracked through their tape linkage instead. Only trainable leaves
    receive a ``grad`` after ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Value-only copy with no tape linkage and no grad requirement."""
        return Tensor(self.data.copy())

    def _live(self) -> bool:
        return self.tape is not None and not self.tape.closed

    # -- operator sugar (scalar operands are promoted to constants) --

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
        return scale(self, -1.0)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._live():
            flags.append(f"node={self.node_id}")
        suffix = f" ({', '.join(flags)})" if flags else ""
        return f"Tensor(shape={self.shape}{suffix})"


class _Node:
    __slots__ = ("kind", "node_id", "input_ids", "backward_fn", "leaf")

    def __init__(self, kind, node_id, input_ids, backward_fn, leaf=None):
        self.kind = kind
        self.node_id = node_id
        self.input_ids = input_ids
        self.backward_fn = backward_fn
        self.leaf = leaf


class Tape:
    """Append-only record of executed operations, replayed once by backward."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.closed = False
        self._leaves: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _bind_leaf(self, t: Tensor) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", node_id, (), None, leaf=t))
        t.tape = self
        t.node_id = node_id
        self._leaves.append(t)
        return node_id

    def _release(self) -> None:
        for t in self._leaves:
            t.tape = None
            t.node_id = None
        self.closed = True
        self.nodes = []
        self._leaves = []
        if getattr(_local, "tape", None) is self:
            _local.tape = None


def _promote(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._live()


def _resolve_tape(inputs: Sequence[Tensor]) -> Tape:
    """The tape this op records on.

    Inputs already on a live tape pin the choice. Otherwise the thread's
    current open tape is reused so that independent branches built from
    unbound leaves (for example a router branch and a projection branch)
    land on one graph; the first such op after a backward opens a fresh tape.
    """
    tapes = {id(t.tape): t.tape for t in inputs if t._live()}
    if len(tapes) > 1:
        raise StateError("operation mixes tensors from different live tapes")
    if tapes:
        return next(iter(tapes.values()))
    current = getattr(_local, "tape", None)
    if current is not None and not current.closed:
        return current
    tape = Tape()
    _local.tape = tape
    return tape


def _apply(kind: str, out_data: Array, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record the op if gradients are live.

    ``backward_fn(g)`` must return one gradient array (or None) per input,
    in order; entries for untracked inputs are ignored.
    """
    out = Tensor(out_data)
    if not grad_enabled() or not any(_tracked(t) for t in inputs):
        return out
    tape = _resolve_tape(inputs)
    input_ids: list[int | None] = []
    for t in inputs:
        if t._live() and t.tape is tape:
            input_ids.append(t.node_id)
        elif t.requires_grad:
            input_ids.append(tape._bind_leaf(t))
        else:
            input_ids.append(None)
    node_id = len(tape.nodes)
    tape.nodes.append(_Node(kind, node_id, tuple(input_ids), backward_fn))
    out.tape = tape
    out.node_id = node_id
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    # Collapse a gradient onto a scalar operand.
    if shape == ():
        return np.asarray(g.sum(), dtype=np.float64)
    return g


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    _check_binary(a, b, "add")

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _apply("add", a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    _check_binary(a, b, "sub")

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _apply("sub", a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _apply("mul", ad * bd, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    _check_binary(a, b, "div")
    if np.any(b.data <= 0):
        raise DomainError("div: denominator entries must be strictly positive")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return _apply("div", ad / bd, (a, b), backward_fn)


def exp(a) -> Tensor:
    a = _promote(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        return (g * out_data,)

    return _apply("exp", out_data, (a,), backward_fn)


def log(a) -> Tensor:
    a = _promote(a)
    if np.any(a.data <= 0):
        raise DomainError("log: arguments must be strictly positive")
    ad = a.data

    def backward_fn(g):
        return (g / ad,)

    return _apply("log", np.log(ad), (a,), backward_fn)


def relu(a) -> Tensor:
    a = _promote(a)
    mask = a.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _apply("relu", np.where(mask, a.data, 0.0), (a,), backward_fn)


def square(a) -> Tensor:
    a = _promote(a)
    ad = a.data

    def backward_fn(g):
        return (2.0 * ad * g,)

    return _apply("square", ad * ad, (a,), backward_fn)


def scale(a, c: float) -> Tensor:
    """Multiply by a Python constant (the constant is never differentiated)."""
    a = _promote(a)
    c = float(c)

    def backward_fn(g):
        return (c * g,)

    return _apply("scale", c * a.data, (a,), backward_fn)


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient flows only through unclamped entries."""
    a = _promote(a)
    floor = float(floor)
    mask = a.data > floor

    def backward_fn(g):
        return (g * mask,)

    return _apply("clamp_min", np.where(mask, a.data, floor), (a,), backward_fn)


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by kind name."""
    if kind not in ELEMENTWISE_KINDS:
        raise ConfigError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ConfigError(f"elementwise {kind!r} needs two operands")
        return {"add": add, "sub": sub, "mul": mul, "div": div}[kind](a, b)
    if kind == "scale":
        if b is None:
            raise ConfigError("elementwise 'scale' needs a constant")
        return scale(a, float(b))
    return {"exp": exp, "log": log, "relu": relu, "square": square}[kind](a)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g @ bd.T, ad.T @ g

    return _apply("matmul", ad @ bd, (a, b), backward_fn)


def transpose(a) -> Tensor:
    a = _promote(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.shape}")

    def backward_fn(g):
        return (g.T,)

    return _apply("transpose", a.data.T.copy(), (a,), backward_fn)


def row(a, index: int) -> Tensor:
    """Extract row ``index`` of a matrix as a 1-D tensor."""
    a = _promote(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row needs a 2-D tensor, got shape {a.shape}")
    if not 0 <= index < a.shape[0]:
        raise IndexError(f"row index {index} out of range for shape {a.shape}")
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _apply("row", a.data[index].copy(), (a,), backward_fn)


def scale_columns(a, weights) -> Tensor:
    """Multiply column j of a matrix by weights[j]."""
    a, weights = _promote(a), _promote(weights)
    if a.data.ndim != 2 or weights.data.ndim != 1:
        raise ShapeError(f"scale_columns needs matrix and vector, got {a.shape}, {weights.shape}")
    if a.shape[1] != weights.shape[0]:
        raise ShapeError(f"scale_columns: {a.shape} has {a.shape[1]} columns, weights has {weights.shape[0]}")
    ad, wd = a.data, weights.data

    def backward_fn(g):
        return g * wd[None, :], (g * ad).sum(axis=0)

    return _apply("scale_columns", ad * wd[None, :], (a, weights), backward_fn)


def pairwise_sqdist(x, y) -> Tensor:
    """Matrix of squared Euclidean distances between rows of x and rows of y."""
    x, y = _promote(x), _promote(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sqdist needs row matrices with equal width, got {x.shape}, {y.shape}")
    xd, yd = x.data, y.data
    sq = (xd * xd).sum(axis=1)[:, None] + (yd * yd).sum(axis=1)[None, :] - 2.0 * (xd @ yd.T)
    np.maximum(sq, 0.0, out=sq)

    def backward_fn(g):
        gx = 2.0 * (g.sum(axis=1)[:, None] * xd - g @ yd)
        gy = 2.0 * (g.sum(axis=0)[:, None] * yd - g.T @ xd)
        return gx, gy

    return _apply("pairwise_sqdist", sq, (x, y), backward_fn)


# ---------------------------------------------------------------------------
# Softmax family


def softmax(a, axis: int = 0) -> Tensor:
    """Numerically safe softmax along ``axis`` (max-subtraction before exp)."""
    a = _promote(a)
    if a.data.ndim == 0 or a.data.size < 1:
        raise ShapeError("softmax needs at least one element along an axis")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax: input contains NaN or infinity")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner),)

    return _apply("softmax", out_data, (a,), backward_fn)


def topk_softmax(a, k: int, axis: int = 0) -> Tensor:
    """Softmax restricted to the k largest entries along ``axis``.

    Non-selected entries get weight exactly 0 and the surviving weights are
    renormalized to sum to 1. Ties are broken toward the lower index. The
    selection itself is treated as a constant during differentiation.
    """
    a = _promote(a)
    if a.data.ndim not in (1, 2) or axis != 0:
        raise ShapeError("topk_softmax supports axis 0 over a vector or matrix")
    n = a.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"topk_softmax: k={k} must be in [1, {n}]")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("topk_softmax: input contains NaN or infinity")
    data = a.data if a.data.ndim == 2 else a.data[:, None]
    # Stable sort on the negated logits keeps the lowest index first on ties.
    order = np.argsort(-data, axis=0, kind="stable")
    mask = np.zeros_like(data, dtype=bool)
    np.put_along_axis(mask, order[:k], True, axis=0)
    selected_max = np.where(mask, data, -np.inf).max(axis=0, keepdims=True)
    e = np.where(mask, np.exp(data - selected_max), 0.0)
    out_data = e / e.sum(axis=0, keepdims=True)
    if a.data.ndim == 1:
        out_data = out_data[:, 0]

    def backward_fn(g):
        inner = (g * out_data).sum(axis=0, keepdims=(a.data.ndim == 2))
        return (out_data * (g - inner),)

    return _apply("topk_softmax", out_data, (a,), backward_fn)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under column softmax.

    ``logits`` is [classes x batch]; column j scores sample j. The backward
    rule is the usual (softmax - one_hot) / batch.
    """
    from .errors import LabelError

    logits = _promote(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs [classes x batch] logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[1]:
        raise ShapeError(f"cross_entropy: {logits.shape[1]} columns but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[0]):
        raise LabelError(f"labels must lie in [0, {logits.shape[0]}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    m = z.max(axis=0, keepdims=True)
    e = np.exp(z - m)
    lse = np.log(e.sum(axis=0)) + m[0]
    batch = z.shape[1]
    picked = z[labels, np.arange(batch)]
    out_data = np.asarray((lse - picked).mean(), dtype=np.float64)
    probs = e / e.sum(axis=0, keepdims=True)

    def backward_fn(g):
        grad = probs.copy()
        grad[labels, np.arange(batch)] -= 1.0
        return (grad * (g / batch),)

    return _apply("cross_entropy", out_data, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions


def _spread(g: Array, shape: tuple[int, ...], axis: int | None) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape).astype(np.float64, copy=True)
    return np.broadcast_to(np.expand_dims(g, axis), shape).astype(np.float64, copy=True)


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _promote(a)
    shape = a.shape
    _check_axis(shape, axis, "sum")

    def backward_fn(g):
        return (_spread(g, shape, axis),)

    return _apply("sum", np.asarray(a.data.sum(axis=axis), dtype=np.float64), (a,), backward_fn)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _promote(a)
    shape = a.shape
    _check_axis(shape, axis, "mean")
    count = a.data.size if axis is None else shape[axis]

    def backward_fn(g):
        return (_spread(g, shape, axis) / count,)

    return _apply("mean", np.asarray(a.data.mean(axis=axis), dtype=np.float64), (a,), backward_fn)


def reduce_var(a, axis: int | None = None) -> Tensor:
    """Population variance (divides by the count, not count - 1)."""
    a = _promote(a)
    shape = a.shape
    _check_axis(shape, axis, "var")
    count = a.data.size if axis is None else shape[axis]
    if count < 2:
        raise InsufficientSamplesError(f"variance needs at least 2 elements along the axis, got {count}")
    centered = a.data - a.data.mean(axis=axis, keepdims=True)

    def backward_fn(g):
        return (_spread(g, shape, axis) * (2.0 / count) * centered,)

    return _apply("var", np.asarray(a.data.var(axis=axis), dtype=np.float64), (a,), backward_fn)


def reduce(kind: str, a, axis: int | None = None) -> Tensor:
    """Dispatch a reduction by kind name."""
    if kind not in REDUCE_KINDS:
        raise ConfigError(f"unknown reduce kind {kind!r}")
    return {"sum": reduce_sum, "mean": reduce_mean, "var": reduce_var}[kind](a, axis)


def _check_axis(shape: tuple[int, ...], axis: int | None, op: str) -> None:
    if axis is None:
        return
    if not isinstance(axis, int) or not 0 <= axis < len(shape):
        raise ShapeError(f"{op}: axis {axis} invalid for shape {shape}")


# ---------------------------------------------------------------------------
# Dropout


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Zero entries with probability p and rescale survivors by 1/(1-p).

    The mask is drawn from ``rng`` when the op runs, so deterministic
    behaviour requires the caller to pass a deterministically seeded
    generator. ``p == 0`` returns the input unchanged.
    """
    a = _promote(a)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)

    def backward_fn(g):
        return (g * mask,)

    return _apply("dropout", a.data * mask, (a,), backward_fn)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking


def backward(loss: Tensor) -> dict[Tensor, Array]:
    """Accumulate d(loss)/d(leaf) into every trainable leaf on the tape.

    Returns a map from leaf tensor to its gradient array. Leaves bound to
    the tape but unreachable from the loss receive zeros. The tape is
    consumed: it is released and cannot be replayed.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss._live():
        raise StateError("backward: loss is not attached to a live tape")
    tape = loss.tape
    grads: list[Array | None] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        g = grads[node.node_id]
        if g is None or node.backward_fn is None:
            continue
        for input_id, contribution in zip(node.input_ids, node.backward_fn(g)):
            if input_id is None or contribution is None:
                continue
            if grads[input_id] is None:
                grads[input_id] = contribution
            else:
                grads[input_id] = grads[input_id] + contribution
    grad_map: dict[Tensor, Array] = {}
    for node in tape.nodes:
        leaf = node.leaf
        if leaf is None or not leaf.requires_grad:
            continue
        g = grads[node.node_id]
        if g is None:
            leaf.grad = np.zeros_like(leaf.data)
        else:
            leaf.grad = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        grad_map[leaf] = leaf.grad
    tape._release()
    return grad_map


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values on each
    call and must be deterministic (freeze any dropout masks). The error for
    each entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"grad_check eps must lie in [1e-7, 1e-4], got {eps}")
    loss = f()
    backward(loss)
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())
    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                hi = float(f().data)
                flat[i] = original - eps
                lo = float(f().data)
                flat[i] = original
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NumericError("grad_check: f is non-finite near the evaluation point")
                numeric = (hi - lo) / (2.0 * eps)
                rel = abs(ana_flat[i] - numeric) / max(abs(ana_flat[i]), abs(numeric), 1e-12)
                worst = max(worst, rel)
    return worst
