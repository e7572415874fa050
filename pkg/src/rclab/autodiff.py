"""Dense 2-D tensors with a reverse-mode tape.

Every value on a tape is a float64 matrix of shape ``(rows, cols)``; scalars
are ``(1, 1)``.  Operations append a node whose id is larger than the ids of
its inputs, so the tape is topologically sorted by construction and the
backward sweep simply walks ids in decreasing order.

Example::

    tape = Tape()
    x = tape.leaf(np.array([[3.0]]))
    y = mul(x, x)
    (gx,) = tape.backward(y, [x])   # [[6.0]]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError

NORM_EPS = 1e-12

VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


@dataclass(eq=False, slots=True)
class Var:
    """Handle to one node of a :class:`Tape`."""

    tape: "Tape"
    id: int
    value: np.ndarray
    op: str
    parents: tuple[int, ...] = ()
    vjp: VJP | None = field(default=None, repr=False)
    requires_grad: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of operations for one backward pass."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []
        self.released = False

    def _push(self, value: np.ndarray, op: str, parents: Sequence[Var] = (),
              vjp: VJP | None = None, requires_grad: bool | None = None) -> Var:
        if self.released:
            raise ContractError("tape has been released")
        rg = False
        for p in parents:
            if p.tape is not self:
                raise ContractError("cannot mix variables from different tapes")
            rg = rg or p.requires_grad
        if requires_grad is None:
            requires_grad = rg
        var = Var(self, len(self.nodes), value, op,
                  tuple(p.id for p in parents), vjp, requires_grad)
        self.nodes.append(var)
        return var

    def leaf(self, value) -> Var:
        return self._push(as_matrix(value).copy(), "leaf", requires_grad=True)

    def const(self, value) -> Var:
        return self._push(as_matrix(value), "const", requires_grad=False)

    def lift(self, value) -> Var:
        return value if isinstance(value, Var) else self.const(value)

    def backward(self, out: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of the scalar ``out`` with respect to each of ``wrt``.

        Nodes are visited in strictly decreasing id order, once each.
        """
        if out.tape is not self:
            raise ContractError("output belongs to another tape")
        if out.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) output, got {out.value.shape}")
        grads: dict[int, np.ndarray] = {out.id: np.ones((1, 1))}
        for node in reversed(self.nodes[: out.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or node.vjp is None:
                if g is not None:
                    grads[node.id] = g
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not self.nodes[pid].requires_grad:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return [grads.get(v.id, np.zeros_like(v.value)) for v in wrt]

    def release(self) -> None:
        """Drop all recorded nodes; the tape cannot be used afterwards."""
        self.nodes = []
        self.released = True


def _tape_of(*items) -> Tape:
    for it in items:
        if isinstance(it, Var):
            return it.tape
    raise ContractError("at least one operand must be a tape variable")


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], op: str) -> tuple[int, int]:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return tape._push(a.value + b.value, "add", (a, b),
                      lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return tape._push(a.value - b.value, "sub", (a, b),
                      lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    """Elementwise product with row/column/scalar broadcasting."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return tape._push(av * bv, "mul", (a, b),
                      lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape._push(a.value * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return tape._push(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    return a.tape._push(a.value.T, "transpose", (a,), lambda g: (g.T,))


def linear(x, w: Var, b: Var) -> Var:
    """``x @ w.T + b`` with ``w`` stored as (out, in) and ``b`` as (1, out)."""
    tape = _tape_of(x, w, b)
    x = tape.lift(x)
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    if b.shape != (1, w.shape[0]):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    xv, wv = x.value, w.value
    return tape._push(xv @ wv.T + b.value, "linear", (x, w, b),
                      lambda g: (g @ wv, g.T @ xv, g.sum(axis=0, keepdims=True)))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape._push(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def sum_all(a: Var) -> Var:
    shape = a.shape
    return a.tape._push(np.array([[a.value.sum()]]), "sum", (a,),
                        lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Var) -> Var:
    n = a.value.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    shape = a.shape
    return a.tape._push(np.array([[a.value.mean()]]), "mean", (a,),
                        lambda g: (np.full(shape, g[0, 0] / n),))


def weighted_sum(a: Var, weights) -> Var:
    """Scalar ``sum(weights * a)`` for a constant weight matrix."""
    w = as_matrix(weights)
    if w.shape != a.shape:
        raise DimensionError(f"weighted_sum: weight shape {w.shape} vs tensor shape {a.shape}")
    return a.tape._push(np.array([[float(np.sum(w * a.value))]]), "weighted_sum", (a,),
                        lambda g: (g[0, 0] * w,))


def rows(a: Var, index) -> Var:
    """Select rows by integer index (duplicates allowed)."""
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._push(a.value[idx], "rows", (a,), vjp)


def concat_rows(parts: Sequence[Var]) -> Var:
    tape = _tape_of(*parts)
    parts = [tape.lift(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return tape._push(np.vstack([p.value for p in parts]), "concat", tuple(parts),
                      lambda g: tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(parts))))


def normalize_rows(a: Var, eps: float = NORM_EPS) -> tuple[Var, np.ndarray]:
    """Project each row onto the unit sphere.

    Rows with norm below ``eps`` map to the first basis vector with zero
    gradient; the boolean array returned alongside flags them.
    """
    v = a.value
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    degenerate = (norms < eps).ravel()
    safe = np.where(norms < eps, 1.0, norms)
    out = v / safe
    if degenerate.any():
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
    y = out

    def vjp(g):
        proj = np.sum(y * g, axis=1, keepdims=True)
        ga = (g - y * proj) / safe
        ga[degenerate] = 0.0
        return (ga,)

    return a.tape._push(out, "normalize", (a,), vjp), degenerate


def pairwise_distance(a: Var, centers) -> Var:
    """Euclidean distances from each row of ``a`` to each row of a constant ``centers``.

    Centers are plain arrays, so no gradient ever flows into them.
    """
    c = as_matrix(centers)
    if c.shape[1] != a.shape[1]:
        raise DimensionError(f"pairwise_distance: shapes {a.shape} and {c.shape}")
    diff = a.value[:, None, :] - c[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(d > 0, g / d, 0.0)
        return (np.einsum("nm,nmk->nk", coef, diff),)

    return a.tape._push(d, "pdist", (a,), vjp)


def logsumexp_rows(a: Var, mask=None) -> Var:
    """Row-wise log-sum-exp over the entries where ``mask`` is true.

    Max-shifted for stability.  Every row needs at least one admitted entry.
    """
    v = a.value
    m = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != v.shape:
        raise DimensionError(f"logsumexp_rows: mask shape {m.shape} vs tensor shape {v.shape}")
    if not m.any(axis=1).all():
        raise ContractError("logsumexp_rows: a row has no admitted entries")
    masked = np.where(m, v, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    ex = np.where(m, np.exp(masked - mx), 0.0)
    s = ex.sum(axis=1, keepdims=True)
    out = mx + np.log(s)
    soft = ex / s
    return a.tape._push(out, "logsumexp", (a,), lambda g: (g * soft,))


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Per-row ``-log softmax(logits)[label]`` as an (n, 1) column; fused and stable."""
    y = np.asarray(labels, dtype=np.int64).ravel()
    v = logits.value
    n, c = v.shape
    if y.shape[0] != n:
        raise DimensionError(f"softmax_cross_entropy: logits {v.shape} vs {y.shape[0]} labels")
    if n == 0:
        raise ContractError("softmax_cross_entropy: empty batch")
    if y.min() < 0 or y.max() >= c:
        raise ContractError(f"labels must lie in [0, {c})")
    mx = v.max(axis=1, keepdims=True)
    ex = np.exp(v - mx)
    s = ex.sum(axis=1, keepdims=True)
    lse = mx + np.log(s)
    out = lse - v[np.arange(n), y][:, None]
    soft = ex / s

    def vjp(g):
        gl = soft.copy()
        gl[np.arange(n), y] -= 1.0
        return (gl * g,)

    return logits.tape._push(out, "softmax_ce", (logits,), vjp)


def soft_cross_entropy(logits: Var, targets) -> Var:
    """Per-row ``logsumexp(logits) - targets . logits`` for constant target rows summing to 1."""
    t = as_matrix(targets)
    v = logits.value
    if t.shape != v.shape:
        raise DimensionError(f"soft_cross_entropy: logits {v.shape} vs targets {t.shape}")
    mx = v.max(axis=1, keepdims=True)
    ex = np.exp(v - mx)
    s = ex.sum(axis=1, keepdims=True)
    out = mx + np.log(s) - np.sum(t * v, axis=1, keepdims=True)
    delta = ex / s - t
    return logits.tape._push(out, "soft_ce", (logits,), lambda g: (delta * g,))


def finite_difference_gradient(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_k) - f(x - h e_k)) / 2h`` for every coordinate."""
    if not h > 0:
        raise ContractError("finite difference step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad
