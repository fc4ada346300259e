"""Dense float64 matrices and reverse-mode automatic differentiation.

Every trainable piece of the pipeline is expressed as a graph of `Node`s
whose values are immutable `Matrix` objects.  Ops record a vector-Jacobian
closure per parent at construction time; `backward` walks the recorded
graph once in reverse topological order and accumulates gradients, so a
node used several times receives the sum of its downstream contributions.

Matrices are strictly 2-D.  Vectors are rows (1 x n) by convention.
Broadcasting is limited to row (1 x m) and column (n x 1) operands.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Matrix",
    "Node",
    "DimensionError",
    "ContractError",
    "parameter",
    "constant",
    "backward",
    "matmul",
    "add",
    "sub",
    "scalar_mul",
    "elementwise_mul",
    "divide",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "gather_rows",
    "row_sums",
    "reduce_sum",
    "reduce_mean",
    "leaky_relu",
    "sigmoid",
    "log",
    "exp",
    "pow_scalar",
    "clip",
    "softmax_rows",
    "log_softmax_rows",
    "l2_normalize_rows",
    "random_uniform",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """An operation was invoked outside its stated contract."""


class Matrix:
    """Immutable 2-D array of 64-bit reals; NaN/Inf rejected at construction."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Matrix requires 2-D data, got ndim={arr.ndim}")
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("Matrix entries must be finite (NaN/Inf rejected)")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    # Internal: wrap a freshly computed array without copying it.
    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Matrix":
        m = object.__new__(cls)
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("Matrix entries must be finite (NaN/Inf rejected)")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(m, "data", arr)
        return m

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def full(cls, rows: int, cols: int, value: float) -> "Matrix":
        return cls._wrap(np.full((rows, cols), float(value)))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls._wrap(np.eye(n))

    def __setattr__(self, name, value):
        raise AttributeError("Matrix is immutable")

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def random_uniform(rng: np.random.Generator, rows: int, cols: int,
                   low: float, high: float) -> Matrix:
    return Matrix._wrap(rng.uniform(low, high, size=(rows, cols)))


# One graph edge: (parent node, closure mapping upstream grad -> parent grad).
_Vjp = Callable[[np.ndarray], np.ndarray]


class Node:
    """A recorded value.  `grad` is populated (as a Matrix) by `backward`."""

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value: Matrix,
                 parents: tuple[tuple["Node", _Vjp], ...] = (),
                 requires_grad: bool = False) -> None:
        self.value = value
        self.grad: Matrix | None = None
        self.parents = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        kind = "param" if (self.requires_grad and not self.parents) else "node"
        return f"Node({kind}, {self.shape[0]}x{self.shape[1]})"


def parameter(value) -> Node:
    """A trainable leaf; `backward` reports its gradient."""
    return Node(value if isinstance(value, Matrix) else Matrix(value),
                requires_grad=True)


def constant(value) -> Node:
    """A non-trainable leaf; gradients are not tracked through it."""
    return Node(value if isinstance(value, Matrix) else Matrix(value))


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, Matrix):
        return constant(x)
    return constant(Matrix(x))


def _make(arr: np.ndarray, edges: Sequence[tuple[Node, _Vjp]]) -> Node:
    # Drop edges into non-differentiable subgraphs so backward never walks them.
    kept = tuple((p, f) for p, f in edges if p.requires_grad)
    return Node(Matrix._wrap(arr), kept)


def backward(root: Node) -> dict[Node, Matrix]:
    """Reverse-mode pass from a scalar root.

    Populates `grad` on every node that lies on a path from a trainable leaf
    to `root` and returns {trainable leaf: gradient}.  Each node is visited
    exactly once; shared subexpressions accumulate additively.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward requires a 1x1 scalar root, got {root.shape}")

    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib

    leaf_grads: dict[Node, Matrix] = {}
    for node in topo:
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = Matrix._wrap(np.array(g, dtype=np.float64))
        if node.requires_grad and not node.parents:
            leaf_grads[node] = node.grad
    return leaf_grads


# ---------------------------------------------------------------------------
# broadcasting helpers (row / column vectors only)

def _broadcast_shape(sa: tuple[int, int], sb: tuple[int, int], opname: str) -> tuple[int, int]:
    out = []
    for da, db in zip(sa, sb):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise DimensionError(f"{opname}: shapes {sa} and {sb} do not conform")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] > 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] > 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# operations

def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    av, bv = a.value.data, b.value.data
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ, {av.shape} x {bv.shape}")
    return _make(av @ bv, (
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ))


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    av, bv = a.value.data, b.value.data
    _broadcast_shape(av.shape, bv.shape, "add")
    return _make(av + bv, (
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ))


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    av, bv = a.value.data, b.value.data
    _broadcast_shape(av.shape, bv.shape, "sub")
    return _make(av - bv, (
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ))


def scalar_mul(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)
    return _make(a.value.data * c, ((a, lambda g: g * c),))


def elementwise_mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    av, bv = a.value.data, b.value.data
    _broadcast_shape(av.shape, bv.shape, "elementwise_mul")
    return _make(av * bv, (
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ))


def divide(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    av, bv = a.value.data, b.value.data
    _broadcast_shape(av.shape, bv.shape, "divide")
    return _make(av / bv, (
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    ))


def transpose(a) -> Node:
    a = _lift(a)
    return _make(a.value.data.T.copy(), ((a, lambda g: g.T),))


def concat_rows(parts: Sequence) -> Node:
    nodes = [_lift(p) for p in parts]
    if not nodes:
        raise ContractError("concat_rows needs at least one operand")
    cols = nodes[0].value.cols
    for n in nodes:
        if n.value.cols != cols:
            raise DimensionError(
                f"concat_rows: column counts differ, {nodes[0].shape} vs {n.shape}")
    out = np.concatenate([n.value.data for n in nodes], axis=0)
    edges = []
    start = 0
    for n in nodes:
        stop = start + n.value.rows
        edges.append((n, (lambda s, e: lambda g: g[s:e])(start, stop)))
        start = stop
    return _make(out, edges)


def concat_cols(parts: Sequence) -> Node:
    nodes = [_lift(p) for p in parts]
    if not nodes:
        raise ContractError("concat_cols needs at least one operand")
    rows = nodes[0].value.rows
    for n in nodes:
        if n.value.rows != rows:
            raise DimensionError(
                f"concat_cols: row counts differ, {nodes[0].shape} vs {n.shape}")
    out = np.concatenate([n.value.data for n in nodes], axis=1)
    edges = []
    start = 0
    for n in nodes:
        stop = start + n.value.cols
        edges.append((n, (lambda s, e: lambda g: g[:, s:e])(start, stop)))
        start = stop
    return _make(out, edges)


def slice_rows(a, start: int, stop: int) -> Node:
    a = _lift(a)
    av = a.value.data
    if not (0 <= start < stop <= av.shape[0]):
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {av.shape}")

    def vjp(g: np.ndarray) -> np.ndarray:
        z = np.zeros_like(av)
        z[start:stop] = g
        return z

    return _make(av[start:stop].copy(), ((a, vjp),))


def slice_cols(a, start: int, stop: int) -> Node:
    a = _lift(a)
    av = a.value.data
    if not (0 <= start < stop <= av.shape[1]):
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {av.shape}")

    def vjp(g: np.ndarray) -> np.ndarray:
        z = np.zeros_like(av)
        z[:, start:stop] = g
        return z

    return _make(av[:, start:stop].copy(), ((a, vjp),))


def gather_rows(a, indices: Sequence[int]) -> Node:
    a = _lift(a)
    av = a.value.data
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows: indices must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= av.shape[0]):
        raise DimensionError(
            f"gather_rows: index out of range for {av.shape[0]} rows")

    def vjp(g: np.ndarray) -> np.ndarray:
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return z

    return _make(av[idx].copy(), ((a, vjp),))


def row_sums(a) -> Node:
    a = _lift(a)
    av = a.value.data
    return _make(av.sum(axis=1, keepdims=True),
                 ((a, lambda g: np.broadcast_to(g, av.shape).copy()),))


def reduce_sum(a) -> Node:
    a = _lift(a)
    av = a.value.data
    return _make(np.array([[av.sum()]]),
                 ((a, lambda g: np.full(av.shape, g[0, 0])),))


def reduce_mean(a) -> Node:
    a = _lift(a)
    av = a.value.data
    n = av.size
    return _make(np.array([[av.mean()]]),
                 ((a, lambda g: np.full(av.shape, g[0, 0] / n)),))


def leaky_relu(a, slope: float = 0.2) -> Node:
    a = _lift(a)
    av = a.value.data
    out = np.where(av > 0, av, slope * av)
    return _make(out, ((a, lambda g: g * np.where(av > 0, 1.0, slope)),))


def sigmoid(a) -> Node:
    a = _lift(a)
    av = a.value.data
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, ((a, lambda g: g * out * (1.0 - out)),))


def log(a) -> Node:
    a = _lift(a)
    av = a.value.data
    return _make(np.log(av), ((a, lambda g: g / av),))


def exp(a) -> Node:
    a = _lift(a)
    out = np.exp(a.value.data)
    return _make(out, ((a, lambda g: g * out),))


def pow_scalar(a, p: float) -> Node:
    a = _lift(a)
    av = a.value.data
    p = float(p)
    out = av ** p
    return _make(out, ((a, lambda g: g * p * av ** (p - 1.0)),))


def clip(a, lo: float, hi: float) -> Node:
    a = _lift(a)
    av = a.value.data
    # Gradient passes only strictly inside the clamp band.
    return _make(np.clip(av, lo, hi),
                 ((a, lambda g: g * ((av > lo) & (av < hi))),))


def softmax_rows(m) -> Node:
    m = _lift(m)
    mv = m.value.data
    shifted = mv - mv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    return _make(out, ((m, vjp),))


def log_softmax_rows(m) -> Node:
    m = _lift(m)
    mv = m.value.data
    shifted = mv - mv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g: np.ndarray) -> np.ndarray:
        return g - soft * g.sum(axis=1, keepdims=True)

    return _make(out, ((m, vjp),))


def l2_normalize_rows(a) -> Node:
    a = _lift(a)
    av = a.value.data
    norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise ContractError(f"l2_normalize_rows: row {zero[0]} has zero norm")
    out = av / norms

    def vjp(g: np.ndarray) -> np.ndarray:
        dot = (g * out).sum(axis=1, keepdims=True)
        return (g - out * dot) / norms

    return _make(out, ((a, vjp),))
