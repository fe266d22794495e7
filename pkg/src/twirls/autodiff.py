"""A small define-by-run reverse-mode tape over numpy arrays.

Only the primitives the model needs are provided. Each primitive returns its
forward value together with a vector-Jacobian product closure. Inputs that
are not :class:`Var` are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .penalty import PenaltySpec, attention_score, attention_score_grad


class TapeError(ValueError):
    pass


@dataclass
class _Node:
    op: str
    value: np.ndarray
    parents: tuple
    vjp: Callable | None
    requires_grad: bool = True


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)

    def variable(self, value, requires_grad: bool = True) -> "Var":
        value = np.array(value, dtype=float)
        self.nodes.append(_Node("leaf", value, (), None, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def record(self, op: str, *inputs, **kw) -> "Var":
        return forward_record(self, op, *inputs, **kw)


class Var:
    __slots__ = ("tape", "idx")
    __array_priority__ = 100

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return forward_record(self.tape, "add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return forward_record(self.tape, "sub", self, other)

    def __rsub__(self, other):
        return forward_record(self.tape, "sub", other, self)

    def __mul__(self, other):
        return forward_record(self.tape, "mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return forward_record(self.tape, "div", self, other)

    def __rtruediv__(self, other):
        return forward_record(self.tape, "div", other, self)

    def __matmul__(self, other):
        return forward_record(self.tape, "matmul", self, other)

    def __rmatmul__(self, other):
        return forward_record(self.tape, "matmul", other, self)

    def __neg__(self):
        return forward_record(self.tape, "mul", self, -1.0)

    def __repr__(self):
        return f"Var(op={self.tape.nodes[self.idx].op}, shape={self.shape})"


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _shape(x):
    return np.shape(x)


# Each primitive: (*values, **kw) -> (out, vjp). vjp(g, need) returns one
# gradient per input; entries whose ``need`` flag is False may be None.

def _add(a, b):
    return a + b, lambda g, need: (_unbroadcast(g, _shape(a)) if need[0] else None,
                                   _unbroadcast(g, _shape(b)) if need[1] else None)


def _sub(a, b):
    return a - b, lambda g, need: (_unbroadcast(g, _shape(a)) if need[0] else None,
                                   _unbroadcast(-g, _shape(b)) if need[1] else None)


def _mul(a, b):
    return a * b, lambda g, need: (_unbroadcast(g * b, _shape(a)) if need[0] else None,
                                   _unbroadcast(g * a, _shape(b)) if need[1] else None)


def _div(a, b):
    out = a / b
    return out, lambda g, need: (_unbroadcast(g / b, _shape(a)) if need[0] else None,
                                 _unbroadcast(-g * out / b, _shape(b)) if need[1] else None)


def _matmul(a, b):
    a2, b2 = np.asarray(a), np.asarray(b)
    if a2.ndim != 2 or b2.ndim != 2 or a2.shape[1] != b2.shape[0]:
        raise TapeError(f"matmul shape mismatch {a2.shape} @ {b2.shape}")
    return a2 @ b2, lambda g, need: (g @ b2.T if need[0] else None, a2.T @ g if need[1] else None)


def _relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), lambda g, need: (g * mask,)


def _square(x):
    return x * x, lambda g, need: (2.0 * g * x,)


def _reduce_sum(x):
    return np.asarray(np.sum(x)), lambda g, need: (np.broadcast_to(g, np.shape(x)).copy(),)


def _row_gather(x, idx):
    n = x.shape[0]

    def vjp(g, need):
        return (_scatter(g, idx, n),)

    return x[idx], vjp


def _scatter(x, idx, n):
    if x.ndim == 1:
        return np.bincount(idx, x, minlength=n)
    S = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return S @ x


def _row_scatter_add(x, idx, n):
    return _scatter(x, idx, n), lambda g, need: (g[idx],)


def _edge_difference(x, graph):
    src, dst = graph.src, graph.dst
    n = graph.num_nodes

    def vjp(g, need):
        return (_scatter(g, src, n) - _scatter(g, dst, n),)

    return x[src] - x[dst], vjp


def _per_edge_scale(x, w):
    # rows of x (m x d) scaled by w (m,)
    return x * w[:, None], lambda g, need: (g * w[:, None] if need[0] else None,
                                            np.einsum("ij,ij->i", g, x) if need[1] else None)


def _reshape(x, shape):
    old = np.shape(x)
    return np.reshape(x, shape), lambda g, need: (np.reshape(g, old),)


def _row_sqnorm(x):
    return np.einsum("ij,ij->i", x, x), lambda g, need: (2.0 * g[:, None] * x,)


def _spmm(M, x, symmetric: bool = False):
    if M.shape[1] != x.shape[0]:
        raise TapeError(f"spmm shape mismatch {M.shape} @ {x.shape}")
    return M @ x, lambda g, need: (None, (M if symmetric else M.T) @ g)


def _attention(zsq, spec: PenaltySpec):
    out = np.asarray(attention_score(spec, zsq), dtype=float)
    d = np.asarray(attention_score_grad(spec, zsq), dtype=float)
    return out, lambda g, need: (g * d,)


def _softmax_xent(logits, labels, mask):
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise TapeError("cross-entropy over an empty index set")
    z = logits[mask]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = np.asarray(labels)[mask]
    k = len(mask)
    loss = -logp[np.arange(k), y].mean()

    def vjp(g, need):
        p = np.exp(logp)
        p[np.arange(k), y] -= 1.0
        out = np.zeros_like(logits)
        np.add.at(out, mask, g * p / k)
        return (out,)

    return np.asarray(loss), vjp


PRIMITIVES = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "matmul": _matmul,
    "relu": _relu,
    "square": _square,
    "reduce_sum": _reduce_sum,
    "row_gather": _row_gather,
    "row_scatter_add": _row_scatter_add,
    "edge_difference": _edge_difference,
    "per_edge_scale": _per_edge_scale,
    "row_sqnorm": _row_sqnorm,
    "reshape": _reshape,
    "spmm": _spmm,
    "attention": _attention,
    "softmax_cross_entropy": _softmax_xent,
}


def forward_record(tape: Tape, op: str, *inputs, **kw) -> Var:
    """Evaluate primitive ``op`` on ``inputs`` and append it to the tape."""
    if op not in PRIMITIVES:
        raise TapeError(f"unknown primitive {op!r}")
    for x in inputs:
        if isinstance(x, Var) and x.tape is not tape:
            raise TapeError("input recorded on a different tape")
    vals = [_val(x) for x in inputs]
    try:
        out, vjp = PRIMITIVES[op](*vals, **kw)
    except ValueError as e:
        if isinstance(e, TapeError):
            raise
        raise TapeError(f"{op}: {e}") from e
    parents = tuple(x.idx if isinstance(x, Var) and tape.nodes[x.idx].requires_grad else None
                    for x in inputs)
    requires = any(p is not None for p in parents)
    tape.nodes.append(_Node(op, np.asarray(out, dtype=float), parents, vjp if requires else None, requires))
    return Var(tape, len(tape.nodes) - 1)


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar; returns adjoints keyed by node index."""
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {loss.idx: np.ones_like(loss.value)}
    for i in range(loss.idx, -1, -1):
        g = adj.get(i)
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        grads = node.vjp(g, tuple(p is not None for p in node.parents))
        for p, gp in zip(node.parents, grads):
            if p is None or gp is None:
                continue
            gp = np.asarray(gp, dtype=float).reshape(tape.nodes[p].value.shape)
            adj[p] = adj[p] + gp if p in adj else gp
    return adj


def grad(tape: Tape, loss: Var, wrt) -> list[np.ndarray]:
    adj = backward(tape, loss)
    return [adj.get(v.idx, np.zeros_like(v.value)) for v in wrt]


def relu(x):
    return forward_record(x.tape, "relu", x)


def reduce_sum(x):
    return forward_record(x.tape, "reduce_sum", x)


def square(x):
    return forward_record(x.tape, "square", x)


def grad_check(fn, params, h: float = 1e-4, floor: float = 1e-6) -> float:
    """Worst per-coordinate relative error between tape and central differences.

    ``fn(tape, *vars)`` must return a scalar Var. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = [np.array(p, dtype=float) for p in params]
    tape = Tape()
    vs = [tape.variable(p) for p in params]
    loss = fn(tape, *vs)
    analytic = grad(tape, loss, vs)

    def value(ps):
        t = Tape()
        out = float(fn(t, *[t.variable(p) for p in ps]).value)
        if not np.isfinite(out):
            raise TapeError("function value is not finite")
        return out

    worst = 0.0
    for k, p in enumerate(params):
        for i in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][i] += h
            minus[k][i] -= h
            num = (value(plus) - value(minus)) / (2 * h)
            a = analytic[k][i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
