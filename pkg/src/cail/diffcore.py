"""Minimal reverse-mode autodiff over dense rank-2 float64 arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays them in reverse and accumulates gradients into the
``grad`` slot of every leaf tensor that has ``requires_grad`` set.  Outside a
tape, ops still compute values but record nothing (inference mode).

Scalars are 1x1 tensors.  ``add``/``sub``/``mul`` broadcast a ``(1, k)``,
``(n, 1)`` or ``(1, 1)`` operand against a full one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor", "Tape", "ShapeError", "AdamState", "Adam", "adam_step",
    "forward_op", "OPS", "no_tape",
    "matmul", "add", "sub", "mul", "scale", "sin", "exp", "log", "relu",
    "sigmoid", "tanh", "softmax_rows", "concat_cols", "concat_rows", "slice2d",
    "sum_", "mean", "l1_norm", "square", "trace", "causal_conv1d",
    "trace_expm_hadamard", "transpose", "reshape", "clamp_min",
    "graph_aggregate",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_from_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} tensors are not supported")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._from_tape = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    kind: str
    operands: tuple[Tensor, ...]
    result: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Gradients accumulate across calls; optimizers clear them per step.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        if not loss._from_tape and loss.requires_grad:
            _accumulate_leaf(loss, pending[id(loss)])
            return
        for rec in reversed(self.records):
            g = pending.pop(id(rec.result), None)
            if g is None:
                continue
            for operand, og in zip(rec.operands, rec.backward(g)):
                if og is None or not operand.requires_grad:
                    continue
                if operand._from_tape:
                    key = id(operand)
                    if key in pending:
                        pending[key] = pending[key] + og
                    else:
                        pending[key] = og
                else:
                    _accumulate_leaf(operand, og)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


class no_tape:
    """Context manager that suspends recording (evaluation mode)."""

    def __enter__(self):
        self._saved = Tape._stack[:]
        Tape._stack.clear()

    def __exit__(self, *exc):
        Tape._stack[:] = self._saved


def _emit(kind, operands, out: np.ndarray, backward) -> Tensor:
    res = Tensor.__new__(Tensor)
    res.data = out
    res.grad = None
    res.name = None
    tape = Tape.current()
    if tape is not None and any(o.requires_grad for o in operands):
        res.requires_grad = True
        res._from_tape = True
        tape.records.append(_Record(kind, tuple(operands), res, backward))
    else:
        res.requires_grad = False
        res._from_tape = False
    return res


def _broadcast_pair(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        shape = None
    if shape is None or shape not in (a.shape, b.shape):
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# --- elementary ops -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _emit("subtract", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair("elementwise-multiply", a, b)
    A, B = a.data, b.data
    return _emit("elementwise-multiply", (a, b), A * B,
                 lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scalar-scale", (x,), x.data * c, lambda g: (g * c,))


def sin(x: Tensor) -> Tensor:
    X = x.data
    return _emit("sin", (x,), np.sin(X), lambda g: (g * np.cos(X),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    X = x.data
    if np.any(X <= 0):
        raise ValueError(f"log: non-positive value {X.min():.3g} in operand of shape {x.shape}")
    return _emit("log", (x,), np.log(X), lambda g: (g / X,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (np.where(mask, g, 0.0),))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(X: np.ndarray) -> np.ndarray:
    out = np.empty_like(X)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    e = np.exp(X[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    Z = x.data / temperature
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    P = E / E.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * P).sum(axis=1, keepdims=True)
        return (P * (g - inner) / temperature,)

    return _emit("row-softmax-with-temperature", (x,), P, back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat-columns: row counts differ {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def back(g):
        return [g[:, edges[i]:edges[i + 1]] for i in range(len(parts))]

    return _emit("concat-columns", tuple(parts), np.hstack([p.data for p in parts]), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat-rows: column counts differ {[p.shape for p in parts]}")
    heights = [p.shape[0] for p in parts]
    edges = np.cumsum([0] + heights)

    def back(g):
        return [g[edges[i]:edges[i + 1]] for i in range(len(parts))]

    return _emit("concat-rows", tuple(parts), np.vstack([p.data for p in parts]), back)


def slice2d(x: Tensor, rows=slice(None), cols=slice(None)) -> Tensor:
    if isinstance(rows, int):
        rows = slice(rows, rows + 1)
    if isinstance(cols, int):
        cols = slice(cols, cols + 1)
    out = x.data[rows, cols]
    if out.size == 0:
        raise ShapeError(f"slice: empty selection from shape {x.shape}")
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _emit("slice", (x,), out.copy(), back)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        out = np.array([[x.data.sum()]])
    else:
        out = x.data.sum(axis=axis, keepdims=True)
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _emit("mean", (x,), np.array([[x.data.mean()]]),
                 lambda g: (np.broadcast_to(g / n, shape),))


def l1_norm(x: Tensor) -> Tensor:
    # subgradient 0 at exact zeros
    sgn = np.sign(x.data)
    return _emit("L1-norm", (x,), np.array([[np.abs(x.data).sum()]]), lambda g: (g * sgn,))


def square(x: Tensor) -> Tensor:
    X = x.data
    return _emit("hadamard-square", (x,), X * X, lambda g: (2.0 * g * X,))


def trace(x: Tensor) -> Tensor:
    if x.shape[0] != x.shape[1]:
        raise ShapeError(f"trace: non-square shape {x.shape}")
    n = x.shape[0]
    return _emit("trace", (x,), np.array([[np.trace(x.data)]]),
                 lambda g: (g[0, 0] * np.eye(n),))


def transpose(x: Tensor) -> Tensor:
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as ({rows}, {cols})")
    shape = x.shape
    return _emit("reshape", (x,), x.data.reshape(rows, cols),
                 lambda g: (g.reshape(shape),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    return _emit("clamp", (x,), np.where(keep, x.data, floor), lambda g: (g * keep,))


def causal_conv1d(x: Tensor, weight: Tensor, kernel: int) -> Tensor:
    """Causal convolution along rows (time) of ``x`` (T x C_in).

    ``weight`` is ``(kernel * C_in) x C_out``; block ``k`` multiplies the input
    lagged by ``kernel - 1 - k`` steps.  Padding is zeros on the left only, so
    output row t depends on input rows ``<= t``.
    """
    T, cin = x.shape
    if weight.shape[0] != kernel * cin:
        raise ShapeError(
            f"causal-1d-convolution: weight {weight.shape} does not fit kernel {kernel} x {cin} channels")
    padded = np.vstack([np.zeros((kernel - 1, cin)), x.data])
    # cols[t] = [x[t-K+1], ..., x[t]] flattened
    cols = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=0)
    cols = cols.transpose(0, 2, 1).reshape(T, kernel * cin)
    W = weight.data

    def back(g):
        dcols = (g @ W.T).reshape(T, kernel, cin)
        dpad = np.zeros_like(padded)
        for k in range(kernel):
            dpad[k:k + T] += dcols[:, k, :]
        return dpad[kernel - 1:], cols.T @ g

    return _emit("causal-1d-convolution", (x, weight), cols @ W, back)


def graph_aggregate(adj: Tensor, h: Tensor, n_nodes: int) -> Tensor:
    """Per-step weighted in-neighbour sum in node-major layout.

    ``adj`` is ``T x N^2`` (row t is the flattened ``N x N`` graph at step t,
    entry ``[j, i]`` weighting edge j -> i); ``h`` is ``(N*T) x d`` with row
    ``i*T + t`` holding node i at step t.  Returns ``out[i*T + t] =
    sum_j adj[t, j*N + i] * h[j*T + t]``.
    """
    T = adj.shape[0]
    N = n_nodes
    if adj.shape[1] != N * N or h.shape[0] != N * T:
        raise ShapeError(f"graph-aggregate: adjacency {adj.shape} and embeddings {h.shape} "
                         f"do not describe {N} nodes")
    d = h.shape[1]
    G = adj.data.reshape(T, N, N)
    H = h.data.reshape(N, T, d)
    out = np.einsum("tji,jtd->itd", G, H).reshape(N * T, d)

    def back(g):
        g3 = g.reshape(N, T, d)
        dG = np.einsum("itd,jtd->tji", g3, H).reshape(T, N * N)
        dH = np.einsum("tji,itd->jtd", G, g3).reshape(N * T, d)
        return dG, dH

    return _emit("graph-aggregate", (adj, h), out, back)


def _taylor_powers(A: np.ndarray, min_terms: int, max_terms: int = 200):
    """Partial sums of exp(A) for elementwise-nonnegative A.

    Sums at least ``min_terms`` powers and keeps going until the next term is
    negligible; returns ``(S_K, S_{K-1})`` where ``S_K = sum_{k<=K} A^k/k!``.
    """
    n = A.shape[0]
    term = np.eye(n)
    prev = np.zeros((n, n))
    total = term.copy()
    k = 0
    while True:
        k += 1
        term = term @ A / k
        prev = total.copy()
        total = total + term
        if k >= min_terms and (not term.any() or term.max() <= 1e-17 * total.max()):
            break
        if k >= max_terms:
            logger.warning("matrix exponential series truncated at %d terms", k)
            break
    return total, prev


def trace_expm_hadamard(G: Tensor) -> Tensor:
    """tr(exp(G o G)) by Taylor series; minus d it is the acyclicity measure.

    The series runs for at least d + 2 terms (exact for nilpotent G o G) and
    continues until converged.  The gradient is the exact derivative of the
    same truncated series, ``2 G o (S_{K-1})^T``.
    """
    if G.shape[0] != G.shape[1]:
        raise ShapeError(f"trace_expm_hadamard: non-square shape {G.shape}")
    X = G.data
    d = X.shape[0]
    total, prev = _taylor_powers(X * X, d + 2)
    return _emit("trace-expm-hadamard", (G,), np.array([[np.trace(total)]]),
                 lambda g: (g[0, 0] * 2.0 * X * prev.T,))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "subtract": sub,
    "elementwise-multiply": mul,
    "scalar-scale": scale,
    "sin": sin,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "row-softmax-with-temperature": softmax_rows,
    "concat-columns": lambda *parts: concat_cols(parts),
    "concat-rows": lambda *parts: concat_rows(parts),
    "slice": slice2d,
    "sum": sum_,
    "mean": mean,
    "L1-norm": l1_norm,
    "hadamard-square": square,
    "trace": trace,
    "causal-1d-convolution": causal_conv1d,
    "trace-expm-hadamard": trace_expm_hadamard,
    "transpose": transpose,
    "reshape": reshape,
    "clamp": clamp_min,
    "graph-aggregate": graph_aggregate,
}


def forward_op(kind: str, operands: Sequence[Tensor], **params) -> Tensor:
    """Dispatch by op-kind name; extra op arguments go in ``params``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*operands, **params)


# --- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = field(default=0)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(m=[np.zeros(p.shape) for p in params],
                   v=[np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float) -> AdamState:
    """One in-place Adam update; a non-finite gradient skips that parameter."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("non-finite gradient for %s at step %d; skipped", p.name or i, state.step)
            continue
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        if lr:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.005):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)
