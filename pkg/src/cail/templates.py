"""Learnable bank of DAG templates and the soft, history-driven selection over it."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import MLP, glorot, zeros


class TrajectoryEncoder:
    """Two causal 1-d convolutions over the state series, relu after each."""

    def __init__(self, n_state: int, rng: np.random.Generator, hidden: int = 16,
                 out_dim: int = 16, kernel: int = 5):
        self.kernel = kernel
        self.w1 = glorot(rng, kernel * n_state, hidden, "enc.w1")
        self.b1 = zeros(1, hidden, "enc.b1")
        self.w2 = glorot(rng, kernel * hidden, out_dim, "enc.w2")
        self.b2 = zeros(1, out_dim, "enc.b2")

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, states: Tensor) -> Tensor:
        x = dc.relu(dc.add(dc.causal_conv1d(states, self.w1, self.kernel), self.b1))
        return dc.relu(dc.add(dc.causal_conv1d(x, self.w2, self.kernel), self.b2))


class TemplateBank:
    """M weighted adjacency templates over the joint (state + action) nodes.

    Templates are stored flattened, one per row of ``weights`` (``M x N^2``,
    entry ``j*N + i`` is edge j -> i).  The diagonal is multiplied by a fixed
    zero mask, so it never receives gradient.
    """

    def __init__(self, n_state: int, n_action: int, n_templates: int, rng: np.random.Generator,
                 temperature: float = 0.1, init_scale: float = 0.1, embed_hidden: int = 32,
                 z_dim: int = 16):
        self.n_state = n_state
        self.n_action = n_action
        n = self.n_nodes
        self.temperature = temperature
        mask = 1.0 - np.eye(n)
        self.mask = Tensor(mask.reshape(1, n * n))
        w = rng.uniform(-init_scale, init_scale, size=(n_templates, n * n)) * self.mask.data
        self.weights = Tensor(w, requires_grad=True, name="bank.templates")
        self.encoder = TrajectoryEncoder(n_state, rng, out_dim=z_dim)
        # g(): flattened template -> u^i, output width must equal the encoder's
        self.embedder = MLP([n * n, embed_hidden, z_dim], rng, "bank.embed")

    @property
    def n_nodes(self) -> int:
        return self.n_state + self.n_action

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weights] + self.encoder.parameters() + self.embedder.parameters()

    def masked(self) -> Tensor:
        return dc.mul(self.weights, self.mask)

    def matrices(self) -> np.ndarray:
        n = self.n_nodes
        return (self.weights.data * self.mask.data).reshape(self.size, n, n)

    def template(self, i: int, flat: Tensor | None = None) -> Tensor:
        n = self.n_nodes
        flat = self.masked() if flat is None else flat
        return dc.reshape(dc.slice2d(flat, rows=i), n, n)

    def encode(self, states) -> Tensor:
        return self.encoder(states if isinstance(states, Tensor) else Tensor(states))

    def select(self, z: Tensor, flat: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Selection weights (``T x M``) and selected graphs (``T x N^2``) for each row of z."""
        flat = self.masked() if flat is None else flat
        u = self.embedder(flat)
        logits = dc.matmul(z, dc.transpose(u))
        alpha = dc.softmax_rows(logits, self.temperature)
        return alpha, dc.matmul(alpha, flat)


def encode_history(bank: TemplateBank, states: np.ndarray) -> np.ndarray:
    """z_t for the last row of a state prefix ``s_1..s_t``."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ValueError("encode_history needs a non-empty t x n_state prefix")
    with dc.no_tape():
        return bank.encode(states).data[-1].copy()


def select(z, bank: TemplateBank) -> tuple[np.ndarray, np.ndarray]:
    """Selection weights and selected ``N x N`` graph for a single encoding z_t."""
    if bank.size < 1:
        raise ValueError("template bank is empty")
    with dc.no_tape():
        alpha, g = bank.select(Tensor(np.asarray(z, dtype=float).reshape(1, -1)))
    n = bank.n_nodes
    return alpha.data[0].copy(), g.data.reshape(n, n)


def sparsity_reg(bank: TemplateBank, flat: Tensor | None = None) -> Tensor:
    return dc.l1_norm(bank.masked() if flat is None else flat)


def acyclicity_reg(bank: TemplateBank, flat: Tensor | None = None) -> Tensor:
    """Sum over templates of tr(exp(G o G)) - N (a single subtraction)."""
    flat = bank.masked() if flat is None else flat
    n = bank.n_nodes
    total = None
    for i in range(bank.size):
        h = dc.sub(dc.trace_expm_hadamard(bank.template(i, flat)), Tensor(float(n)))
        total = h if total is None else dc.add(total, h)
    return total


def acyclicity_value(matrices: np.ndarray) -> float:
    """Numeric twin of :func:`acyclicity_reg` for plain arrays."""
    with dc.no_tape():
        return float(sum(dc.trace_expm_hadamard(Tensor(g)).item() - g.shape[0] for g in matrices))


def option_loss(alpha: Tensor, labels: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Cross-entropy ``-sum_t log alpha_t[q_t]`` against integer group labels."""
    labels = np.asarray(labels, dtype=int)
    T, M = alpha.shape
    if labels.shape != (T,) or labels.min() < 0 or labels.max() >= M:
        raise ValueError(f"labels must be {T} integers in [0, {M})")
    onehot = np.zeros((T, M))
    onehot[np.arange(T), labels] = 1.0
    picked = dc.mul(dc.log(dc.clamp_min(alpha, floor)), Tensor(onehot))
    return dc.scale(dc.sum_(picked), -1.0)
