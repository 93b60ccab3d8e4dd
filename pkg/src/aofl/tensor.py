"""Dense 2-D tensors with define-by-run reverse-mode differentiation.

Every tensor is a float64 matrix. Vectors are stored as ``1 x n`` rows and
scalars as ``1 x 1``. Binary ops require equal shapes; the only implicit
broadcast is a Python scalar against a tensor. Row/column expansion is done
explicitly with :func:`expand_cols` / :func:`expand_rows`, which are plain
matmuls against a ones vector so their gradients need no special casing.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8

Number = (int, float, np.floating, np.integer)


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Input lies outside the domain of a pointwise function."""


class DegenerateVectorError(ValueError):
    """A cosine was requested for a vector with (near) zero norm."""


class ContractError(RuntimeError):
    """API misuse, e.g. backward from a non-scalar."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, op: str, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis)

    # -- differentiation -------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable leaf t."""
        if self.shape != (1, 1):
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = topological_order(self)
        # intermediate gradients live only for this call, so repeated
        # backward passes over a shared graph do not contaminate each other
        grads = {id(self): np.ones((1, 1))}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass(frozen=True)
class GraphNode:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass(frozen=True)
class Graph:
    """Insertion-ordered record of the operations behind a tensor."""

    nodes: tuple[GraphNode, ...]

    @classmethod
    def of(cls, root: Tensor) -> "Graph":
        order = topological_order(root)
        index = {id(t): k for k, t in enumerate(order)}
        return cls(tuple(GraphNode(t.op, tuple(index[id(p)] for p in t._parents), index[id(t)]) for t in order))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return Tensor._result(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def ones(rows: int, cols: int) -> Tensor:
    return Tensor(np.ones((rows, cols)))


def expand_cols(col: Tensor, k: int) -> Tensor:
    """Repeat an ``n x 1`` column ``k`` times -> ``n x k``."""
    if col.cols != 1:
        raise ShapeError(f"expand_cols expects a column, got {col.shape}")
    return matmul(col, ones(1, k))


def expand_rows(row: Tensor, n: int) -> Tensor:
    """Stack a ``1 x c`` row ``n`` times -> ``n x c``."""
    if row.rows != 1:
        raise ShapeError(f"expand_rows expects a row, got {row.shape}")
    return matmul(ones(n, 1), row)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return Tensor._result(a.data + b, (a,), "add_scalar", lambda g: (g,))
    _same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return Tensor._result(a.data - b, (a,), "sub_scalar", lambda g: (g,))
    _same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return scale(a, b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return scale(a, 1.0 / b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(out, (a, b), "div", lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), "scale", lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), "neg", lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if ad.size and not np.all(ad > 0):
        raise DomainError(f"log of non-positive value (min {ad.min():.3g})")
    return Tensor._result(np.log(ad), (a,), "log", lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    ad = a.data
    if ad.size and not np.all(ad >= 0):
        raise DomainError(f"sqrt of negative value (min {ad.min():.3g})")
    out = np.sqrt(ad)

    def backward(g):
        # subgradient 0 at the origin, where the true derivative is unbounded
        with np.errstate(divide="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return Tensor._result(out, (a,), "sqrt", backward)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(ad * ad, (a,), "square", lambda g: (2.0 * g * ad,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
    "tanh": tanh, "relu": relu, "exp": exp, "log": log, "neg": neg,
    "sqrt": sqrt, "square": square,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch a pointwise op by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a) if b is None else fn(a, b)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

_AXES = {None: None, "all": None, 0: 0, "col": 0, 1: 1, "row": 1}


def _axis(axis):
    try:
        return _AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be one of {sorted(map(str, _AXES))}, got {axis!r}") from None


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    """Sum keeping 2-D shape. ``axis=0``/"col" sums down columns (-> 1 x c),
    ``axis=1``/"row" sums along rows (-> r x 1)."""
    ax = _axis(axis)
    shape = a.shape
    if ax is None:
        out = np.array([[a.data.sum()]])
        return Tensor._result(out, (a,), "sum", lambda g: (np.full(shape, g[0, 0]),))
    out = a.data.sum(axis=ax, keepdims=True)
    return Tensor._result(out, (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    ax = _axis(axis)
    n = a.data.size if ax is None else a.shape[ax]
    if n == 0:
        raise ShapeError(f"mean over an empty extent of {a.shape}")
    return scale(reduce_sum(a, ax), 1.0 / n)


def reduce(kind: str, a: Tensor, axis=None) -> Tensor:
    if kind == "sum":
        return reduce_sum(a, axis)
    if kind == "mean":
        return reduce_mean(a, axis)
    raise ValueError(f"unknown reduction {kind!r}")


def row_max(a: Tensor) -> Tensor:
    """Constant (non-differentiable) row maxima, used as a log-sum-exp shift."""
    return Tensor(a.data.max(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# vector geometry
# ---------------------------------------------------------------------------

def _check_vector(name: str, u: Tensor) -> None:
    if u.rows != 1 and u.cols != 1:
        raise ShapeError(f"{name}: expected a vector, got shape {u.shape}")


def dot(u: Tensor, v: Tensor) -> Tensor:
    _check_vector("dot", u)
    _check_vector("dot", v)
    if u.data.size != v.data.size:
        raise ShapeError(f"dot: length mismatch {u.data.size} vs {v.data.size}")
    ud, vd = u.data, v.data
    out = np.array([[float(ud.ravel() @ vd.ravel())]])
    return Tensor._result(out, (u, v), "dot", lambda g: (g[0, 0] * vd.reshape(ud.shape), g[0, 0] * ud.reshape(vd.shape)))


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two vectors."""
    _check_vector("cosine", u)
    _check_vector("cosine", v)
    if u.data.size != v.data.size:
        raise ShapeError(f"cosine: length mismatch {u.data.size} vs {v.data.size}")
    out = row_cosine(Tensor._result(u.data.reshape(1, -1), (u,), "reshape", lambda g: (g.reshape(u.shape),)),
                     Tensor._result(v.data.reshape(1, -1), (v,), "reshape", lambda g: (g.reshape(v.shape),)))
    return out


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Per-row cosine similarity of two ``n x d`` tensors -> ``n x 1``."""
    _same_shape("row_cosine", a, b)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=1, keepdims=True))
    if np.any(na <= EPS) or np.any(nb <= EPS):
        bad = np.flatnonzero((na <= EPS) | (nb <= EPS))
        raise DegenerateVectorError(f"cosine of near-zero vector in row(s) {bad.tolist()}")
    c = (ad * bd).sum(axis=1, keepdims=True) / (na * nb)

    def backward(g):
        ga = g * (bd / (na * nb) - c * ad / (na * na))
        gb = g * (ad / (na * nb) - c * bd / (nb * nb))
        return ga, gb

    return Tensor._result(c, (a, b), "row_cosine", backward)


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of every row -> ``n x 1``."""
    return sqrt(reduce_sum(square(a), axis=1))


def normalize_rows(a: Tensor) -> Tensor:
    norms = row_norm(a)
    if np.any(norms.data <= EPS):
        raise DegenerateVectorError("cannot normalize a near-zero row")
    return div(a, expand_cols(norms, a.cols))


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(*tensors: Tensor, axis: int = 1) -> Tensor:
    """Join tensors side by side (``axis=1``) or stacked (``axis=0``)."""
    if not tensors:
        raise ShapeError("concat of nothing")
    other = 1 - axis
    extents = {t.shape[other] for t in tensors}
    if len(extents) != 1:
        raise ShapeError(f"concat(axis={axis}): shapes {[t.shape for t in tensors]} disagree")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        if axis == 1:
            return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(tensors)))
        return tuple(g[bounds[k]:bounds[k + 1], :] for k in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), "concat", backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.cols:
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return Tensor._result(a.data[:, start:stop].copy(), (a,), "slice_cols", backward)


def take_row(a: Tensor, i: int) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[i] = g[0]
        return (full,)

    return Tensor._result(a.data[i:i + 1].copy(), (a,), "take_row", backward)


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._result(s, (a,), "softmax_rows", backward)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def _entries(t: Tensor, max_entries: int | None, rng: np.random.Generator) -> Iterable[tuple[int, int]]:
    idx = np.arange(t.data.size)
    if max_entries is not None and idx.size > max_entries:
        idx = np.sort(rng.choice(idx, size=max_entries, replace=False))
    return [np.unravel_index(k, t.shape) for k in idx]


def grad_check_many(
    f: Callable[[], dict[str, Tensor]],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare backprop against central differences for several scalar outputs.

    ``f`` rebuilds the graph from the current parameter values on each call and
    returns named scalar tensors. One forward per perturbation serves every
    output. ``max_entries`` samples at most that many coordinates per parameter.
    Returns, per output, max |analytic - numeric| / max(1, |analytic|).
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
    outputs = f()
    analytic: dict[str, list[np.ndarray]] = {}
    for name, out in outputs.items():
        for p in params:
            p.grad = None
        out.backward()
        analytic[name] = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in outputs}
    with no_grad():
        for k, p in enumerate(params):
            for idx in _entries(p, max_entries, rng):
                orig = p.data[idx]
                p.data[idx] = orig + step
                plus = {n: t.item() for n, t in f().items()}
                p.data[idx] = orig - step
                minus = {n: t.item() for n, t in f().items()}
                p.data[idx] = orig
                for name in outputs:
                    numeric = (plus[name] - minus[name]) / (2 * step)
                    a = analytic[name][k][idx]
                    worst[name] = max(worst[name], abs(a - numeric) / max(1.0, abs(a)))
    return worst


def grad_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor], step: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences of ``f``."""
    params = [x] if isinstance(x, Tensor) else list(x)
    return grad_check_many(lambda: {"f": f()}, params, step, max_entries, seed)["f"]
