"""Minimal reverse-mode autodiff over 64-bit numpy arrays.

Tensors record their producing operation as a backward closure plus parent
references; ``backward()`` on a scalar walks the graph in reverse topological
order and accumulates ``d(loss)/d(tensor)`` into every reachable tensor with
``requires_grad=True``. Frozen tensors never receive a gradient buffer.

Elementwise broadcasting is deliberately restricted: after right-aligning
shapes, an operand may only be expanded along leading axes (missing axes or
axes of size 1 forming a prefix). Anything else raises ``ShapeError``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class OpError(ValueError):
    pass


class ShapeError(OpError):
    pass


class AxisError(OpError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float64 array with optional gradient and lineage."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; scalars wrap into constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return multiply(_as_tensor(other), self)

    def __truediv__(self, other):
        return divide(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], bw: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# broadcasting (leading axes only)
# ---------------------------------------------------------------------------

def _broadcast_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    nd = max(len(sa), len(sb))
    pa = (1,) * (nd - len(sa)) + sa
    pb = (1,) * (nd - len(sb)) + sb
    out = []
    for da, db in zip(pa, pb):
        if da == db:
            out.append(da)
        elif da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")
    out = tuple(out)
    for orig, padded in ((sa, pa), (sb, pb)):
        mism = [i for i in range(nd) if padded[i] != out[i]]
        if mism and mism != list(range(len(mism))):
            raise ShapeError(
                f"{op}: broadcasting of {orig} against result {out} requires "
                "expansion on a non-leading axis"
            )
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bw)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("subtract", a.shape, b.shape)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bw)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("multiply", a.shape, b.shape)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bw)


def divide(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("divide", a.shape, b.shape)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    data = a.data * factor

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * factor)

    return _make(data, (a,), bw)


def _unary(a: Tensor, fwd, dfn) -> Tensor:
    data = fwd(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * dfn(a.data, data))

    return _make(data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a: Tensor) -> Tensor:
    return _unary(a, lambda x: 1.0 / (1.0 + np.exp(-x)), lambda x, y: y * (1.0 - y))


def relu(a: Tensor) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def softplus(a: Tensor) -> Tensor:
    # logaddexp is stable for large |x|
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: 1.0 / (1.0 + np.exp(-x)))


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def square(a: Tensor) -> Tensor:
    return _unary(a, np.square, lambda x, y: 2.0 * x)


def sqrt(a: Tensor) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def absolute(a: Tensor) -> Tensor:
    return _unary(a, np.abs, lambda x, y: np.sign(x))


# ---------------------------------------------------------------------------
# shape / structure ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(data, (a,), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(int(x) for x in axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    data = a.data.transpose(axes)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    axis = _check_axis("concat", axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for i in range(t.ndim):
            if i != axis and t.shape[i] != tensors[0].shape[i]:
                raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), bw)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list:
    axis = _check_axis("split", axis, a.ndim)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {axis} of shape {a.shape}")
    pieces = []
    lo = 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(lo, lo + s)
        idx = tuple(idx)
        data = a.data[idx]

        def bw(g, idx=idx):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[idx] = g
                a._accumulate(full)

        pieces.append(_make(data, (a,), bw))
        lo += s
    return pieces


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        data = a.data.sum()

        def bw(g):
            if a.requires_grad:
                a._accumulate(np.broadcast_to(g, a.shape).astype(np.float64))

        return _make(np.asarray(data), (a,), bw)
    axis = _check_axis("sum", axis, a.ndim)
    data = a.data.sum(axis=axis)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(np.float64))

    return _make(data, (a,), bw)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[_check_axis("mean", axis, a.ndim)]
    return scale(sum_(a, axis), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}: {e}") from None

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer index array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise AxisError(f"embedding: index out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
            table._accumulate(full)

    return _make(data, (table,), bw)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with ``value`` (constant)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    data = np.where(mask, float(value), a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.where(mask, 0.0, g))

    return _make(data, (a,), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Pick one entry per row of a 2-d tensor: out[i] = a[i, idx[i]]."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-d tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, idx), g)
            a._accumulate(full)

    return _make(data, (a,), bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout with a seeded mask; identity when not training."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)
    data = a.data * keep

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * keep)

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# dispatcher, backward, verification helpers
# ---------------------------------------------------------------------------

OPS = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "scale": scale,
    "matmul": matmul,
    "concat": concat,
    "split": split,
    "mean": mean,
    "sum": sum_,
    "transpose": transpose,
    "reshape": reshape,
    "softmax": softmax,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "square": square,
    "sqrt": sqrt,
    "abs": absolute,
    "embedding": embedding,
    "masked_fill": masked_fill,
    "gather_rows": gather_rows,
}


def op_forward(kind: str, inputs: Sequence, attrs: Optional[dict] = None):
    """Dispatch an operation by tag. ``concat`` takes the input list whole."""
    if kind not in OPS:
        raise OpError(f"unknown operation tag {kind!r}")
    fn = OPS[kind]
    attrs = attrs or {}
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from a scalar."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # iterative post-order topological sort
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def seeded_normal(shape, seed: int, std: float = 1.0) -> Tensor:
    """Deterministic N(0, std^2) draw; bitwise identical for equal seeds."""
    if std <= 0:
        raise ValueError(f"seeded_normal: std must be positive, got {std}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, std, size=tuple(shape)))


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a tensor to a scalar tensor. The relative error at each
    coordinate is |analytic - central| / max(1, |central|).
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    loss = fn(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flatten = point.data.reshape(-1).copy()
    central = np.zeros_like(flatten)
    with no_grad():
        for i in range(flatten.size):
            orig = flatten[i]
            flatten[i] = orig + eps
            hi = fn(Tensor(flatten.reshape(point.shape))).item()
            flatten[i] = orig - eps
            lo = fn(Tensor(flatten.reshape(point.shape))).item()
            flatten[i] = orig
            central[i] = (hi - lo) / (2.0 * eps)
    num = np.abs(analytic.reshape(-1) - central)
    den = np.maximum(1.0, np.abs(central))
    return float((num / den).max()) if num.size else 0.0
