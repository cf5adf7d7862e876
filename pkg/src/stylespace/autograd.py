"""Reverse-mode autodiff over dense 2-D float arrays.

Every value is a matrix (scalars are 1x1). Ops build an implicit DAG through
`_inputs` links; node ids increase monotonically with creation order, so
ancestor ids sorted ascending are already a topological order and `backward`
visits each node exactly once in reverse. Gradients accumulate with `+=` so a
tensor feeding several consumers (the shared embedding feeds every projection
head plus its own loss) is handled correctly.

Supported broadcasting: a 1xN row, an Mx1 column, or a 1x1 scalar against an
MxN matrix in add/sub/mul. Nothing wider, no higher-order derivatives.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import GraphError, ShapeError

DEFAULT_DTYPE = np.float64
COSINE_EPS = 1e-8

_ids = itertools.count()


class Tensor:
    """A 2-D array node in the computation graph.

    Leaves are created directly (parameters with requires_grad=True, data
    constants with requires_grad=False); interior nodes come out of the op
    functions below. Values are never mutated by ops; the optimizer mutates
    leaf values between graphs.
    """

    __slots__ = ("values", "requires_grad", "grad", "name",
                 "_nid", "_inputs", "_backward_fn", "_backward_done")

    def __init__(self, values, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        if dtype is None:
            if isinstance(values, np.ndarray) and values.dtype in (np.float32, np.float64):
                dtype = values.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.array(values, dtype=dtype)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D; got array of shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"tensor dimensions must be positive; got {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._nid = next(_ids)
        self._inputs: tuple = ()
        self._backward_fn: Optional[Callable[[], None]] = None
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def scalar(value: float, dtype=None) -> Tensor:
    return Tensor([[float(value)]], dtype=dtype)


def zeros(rows: int, cols: int, requires_grad: bool = False, name=None, dtype=None) -> Tensor:
    return Tensor(np.zeros((rows, cols), dtype=dtype or DEFAULT_DTYPE),
                  requires_grad=requires_grad, name=name)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _make(values: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Optional[Callable[[Tensor], Callable[[], None]]]) -> Tensor:
    out = Tensor(values)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad and backward_fn is not None:
        out._inputs = tuple(inputs)
        out._backward_fn = backward_fn(out)
    return out


def backward(root: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar root.

    A second call on the same root is an error: gradients would accumulate
    twice. Build a fresh graph (or fresh root) per backward pass.
    """
    if root.shape != (1, 1):
        raise GraphError(f"backward root must be scalar (1x1), got {root.shape}")
    if root._backward_done:
        raise GraphError("backward already ran from this root; rebuild the graph first")
    root._backward_done = True
    if not root.requires_grad:
        return

    ordered: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            ordered.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    ordered.sort(key=lambda t: t._nid)

    for node in ordered:
        if node.grad is None:
            node.grad = np.zeros_like(node.values)
    root.grad = np.ones_like(root.values)
    for node in reversed(ordered):
        if node._backward_fn is not None:
            node._backward_fn()


def clear_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise ops (with row/column/scalar broadcasting)
# ---------------------------------------------------------------------------

def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    for small, big in ((sa, sb), (sb, sa)):
        if small == (1, 1):
            return big
        if small[0] == 1 and small[1] == big[1]:
            return big
        if small[1] == 1 and small[0] == big[0]:
            return big
    raise ShapeError(f"shapes {sa} and {sb} do not broadcast (row/column/scalar only)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                _accumulate(a, _reduce_to(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(out.grad, b.shape))
        return run

    return _make(a.values + b.values, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                _accumulate(a, _reduce_to(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(-out.grad, b.shape))
        return run

    return _make(a.values - b.values, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                _accumulate(a, _reduce_to(out.grad * b.values, a.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(out.grad * a.values, b.shape))
        return run

    return _make(a.values * b.values, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(out: Tensor):
        def run():
            _accumulate(a, out.grad * c)
        return run

    return _make(a.values * c, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    vals = np.tanh(a.values)

    def bw(out: Tensor):
        def run():
            _accumulate(a, out.grad * (1.0 - out.values * out.values))
        return run

    return _make(vals, (a,), bw)


def exp(a: Tensor) -> Tensor:
    vals = np.exp(a.values)

    def bw(out: Tensor):
        def run():
            _accumulate(a, out.grad * out.values)
        return run

    return _make(vals, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(out: Tensor):
        def run():
            _accumulate(a, out.grad / a.values)
        return run

    return _make(np.log(a.values), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                _accumulate(a, out.grad @ b.values.T)
            if b.requires_grad:
                _accumulate(b, a.values.T @ out.grad)
        return run

    return _make(a.values @ b.values, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(out: Tensor):
        def run():
            _accumulate(a, out.grad.T)
        return run

    return _make(a.values.T.copy(), (a,), bw)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size == 0:
        raise ShapeError("gather_rows needs at least one index")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")

    def bw(out: Tensor):
        def run():
            g = np.zeros_like(a.values)
            np.add.at(g, idx, out.grad)
            _accumulate(a, g)
        return run

    return _make(a.values[idx].copy(), (a,), bw)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = tensors[0].shape[1]
    for t in tensors:
        if t.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch: {t.shape} vs {cols} cols")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def bw(out: Tensor):
        def run():
            pieces = np.split(out.grad, splits, axis=0)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    _accumulate(t, g)
        return run

    return _make(np.concatenate([t.values for t in tensors], axis=0), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    def bw(out: Tensor):
        def run():
            _accumulate(a, np.full_like(a.values, out.grad[0, 0]))
        return run

    return _make(np.array([[a.values.sum()]], dtype=a.values.dtype), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size

    def bw(out: Tensor):
        def run():
            _accumulate(a, np.full_like(a.values, out.grad[0, 0] / n))
        return run

    return _make(np.array([[a.values.mean()]], dtype=a.values.dtype), (a,), bw)


def row_sum(a: Tensor) -> Tensor:
    def bw(out: Tensor):
        def run():
            _accumulate(a, np.broadcast_to(out.grad, a.shape).copy())
        return run

    return _make(a.values.sum(axis=1, keepdims=True), (a,), bw)


def row_mean(a: Tensor) -> Tensor:
    n = a.shape[1]

    def bw(out: Tensor):
        def run():
            _accumulate(a, np.broadcast_to(out.grad / n, a.shape).copy())
        return run

    return _make(a.values.mean(axis=1, keepdims=True), (a,), bw)


def col_sum(a: Tensor) -> Tensor:
    def bw(out: Tensor):
        def run():
            _accumulate(a, np.broadcast_to(out.grad, a.shape).copy())
        return run

    return _make(a.values.sum(axis=0, keepdims=True), (a,), bw)


def col_mean(a: Tensor) -> Tensor:
    m = a.shape[0]

    def bw(out: Tensor):
        def run():
            _accumulate(a, np.broadcast_to(out.grad / m, a.shape).copy())
        return run

    return _make(a.values.mean(axis=0, keepdims=True), (a,), bw)


# ---------------------------------------------------------------------------
# similarity and softmax kernels
# ---------------------------------------------------------------------------

def _clamped_norms(v: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    raw = np.sqrt((v * v).sum(axis=1))
    return np.maximum(raw, eps), raw


def cosine_sim_matrix(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """All-pairs cosine similarity between rows of a (m x d) and b (n x d).

    Row norms are clamped at eps, so a zero row is similar 0 to everything;
    when the clamp is active that row's norm is treated as the constant eps
    in the backward pass (max subgradient).
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_sim_matrix column mismatch: {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    na, raw_a = _clamped_norms(a.values, eps)
    nb, raw_b = _clamped_norms(b.values, eps)
    sims = (a.values @ b.values.T) / (na[:, None] * nb[None, :])

    def bw(out: Tensor):
        def run():
            g = out.grad
            if a.requires_grad:
                ga = (g / nb[None, :]) @ b.values / na[:, None]
                live = (raw_a >= eps).astype(a.values.dtype)
                coef = (g * out.values).sum(axis=1) / (na * na) * live
                ga -= coef[:, None] * a.values
                _accumulate(a, ga)
            if b.requires_grad:
                gb = (g.T / na[None, :]) @ a.values / nb[:, None]
                live = (raw_b >= eps).astype(b.values.dtype)
                coef = (g * out.values).sum(axis=0) / (nb * nb) * live
                gb -= coef[:, None] * b.values
                _accumulate(b, gb)
        return run

    return _make(sims, (a, b), bw)


def cosine_sim_rows(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Row-wise cosine similarity: (m x d, m x d) -> m x 1."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim_rows shape mismatch: {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    na, raw_a = _clamped_norms(a.values, eps)
    nb, raw_b = _clamped_norms(b.values, eps)
    dots = (a.values * b.values).sum(axis=1)
    sims = (dots / (na * nb))[:, None]

    def bw(out: Tensor):
        def run():
            g = out.grad[:, 0]
            if a.requires_grad:
                live = (raw_a >= eps).astype(a.values.dtype)
                ga = (g / (na * nb))[:, None] * b.values
                ga -= ((g * sims[:, 0] / (na * na)) * live)[:, None] * a.values
                _accumulate(a, ga)
            if b.requires_grad:
                live = (raw_b >= eps).astype(b.values.dtype)
                gb = (g / (na * nb))[:, None] * a.values
                gb -= ((g * sims[:, 0] / (nb * nb)) * live)[:, None] * b.values
                _accumulate(b, gb)
        return run

    return _make(sims, (a, b), bw)


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def bw(out: Tensor):
        def run():
            dot = (out.grad * out.values).sum(axis=1, keepdims=True)
            _accumulate(a, out.values * (out.grad - dot))
        return run

    return _make(probs, (a,), bw)


def log_softmax_row_masked(scores: Tensor, exclude_diagonal: bool = True) -> Tensor:
    """Row-wise log-softmax; with exclude_diagonal the self entry is dropped
    from each row's normalizing sum, the diagonal of the result is 0, and no
    gradient flows through it.
    """
    m, n = scores.shape
    if m != n:
        raise ShapeError(f"log_softmax_row_masked needs a square input, got {scores.shape}")
    if exclude_diagonal:
        if m < 2:
            raise GraphError("degenerate batch: diagonal exclusion needs at least 2 rows")
        mask = ~np.eye(m, dtype=bool)
    else:
        mask = np.ones((m, n), dtype=bool)
    fmask = mask.astype(scores.values.dtype)

    neg_inf = np.where(mask, scores.values, -np.inf)
    rowmax = neg_inf.max(axis=1, keepdims=True)
    shifted = scores.values - rowmax
    e = np.exp(shifted) * fmask
    z = e.sum(axis=1, keepdims=True)
    out_vals = (shifted - np.log(z)) * fmask
    probs = e / z

    def bw(out: Tensor):
        def run():
            g = out.grad * fmask
            _accumulate(scores, g - probs * g.sum(axis=1, keepdims=True))
        return run

    return _make(out_vals, (scores,), bw)
