"""Causal-relation encoding: variable embeddings refined by edge-aware message passing.

Embeddings for a whole sequence are held node-major: row ``i*T + t`` is
node i at step t, for an ``(N*T) x d`` matrix.  State nodes come first,
then action nodes.
"""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import glorot


class CausalEncoder:
    """Embedding table plus ``layers`` rounds of edge-aware message passing.

    ``table`` rows ``0..n_state-1`` are the per-variable matrices E_j (scalar
    variables, so one row each); the remaining rows are the action base vectors,
    which start at zero.
    """

    def __init__(self, n_state: int, n_action: int, rng: np.random.Generator,
                 dim: int = 16, layers: int = 2):
        if layers < 1:
            raise ValueError("need at least one message-passing layer")
        self.n_state = n_state
        self.n_action = n_action
        self.dim = dim
        table = np.zeros((n_state + n_action, dim))
        table[:n_state] = rng.normal(0.0, 1.0, size=(n_state, dim))
        self.table = Tensor(table, requires_grad=True, name="enc.table")
        self.w_edge = [glorot(rng, 2 * dim, dim, f"enc.w_edge{l}") for l in range(layers)]
        self.w_agg = [glorot(rng, 2 * dim, dim, f"enc.w_agg{l}") for l in range(layers)]
        n = self.n_nodes
        # column sums of a flattened N x N graph: in-weight of each node
        self._in_weight = Tensor(np.kron(np.ones((n, 1)), np.eye(n)))

    @property
    def n_nodes(self) -> int:
        return self.n_state + self.n_action

    @property
    def layers(self) -> int:
        return len(self.w_edge)

    def parameters(self) -> list[Tensor]:
        return [self.table] + self.w_edge + self.w_agg

    def init_embeddings(self, states: np.ndarray) -> Tensor:
        """Layer-0 embeddings: state row ``s_{t,j} * E_j``, action rows the base vectors."""
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[1] != self.n_state:
            raise ValueError(f"states must be T x {self.n_state}, got {states.shape}")
        T = states.shape[0]
        n = self.n_nodes
        scale = np.ones((n, T))
        scale[:self.n_state] = states.T
        owner = np.kron(np.eye(n), np.ones((T, 1)))  # (N*T) x N one-hot of node
        per_row = dc.matmul(Tensor(owner), self.table)
        return dc.mul(Tensor(scale.reshape(n * T, 1)), per_row)

    def message_pass(self, h: Tensor, graphs: Tensor, layer: int) -> Tensor:
        """One edge-aware round.

        m_{j->i} = [h_i, h_j] W_edge, so the weighted sum over senders splits into
        ``(sum_j G[j,i]) * h_i W_top + sum_j G[j,i] * h_j W_bottom``.
        """
        n, d = self.n_nodes, self.dim
        T = graphs.shape[0]
        if h.shape != (n * T, d):
            raise dc.ShapeError(f"embeddings {h.shape} do not match {n} nodes x {T} steps")
        w = self.w_edge[layer]
        w_recv = dc.slice2d(w, rows=slice(0, d))
        w_send = dc.slice2d(w, rows=slice(d, 2 * d))
        in_weight = dc.reshape(dc.transpose(dc.matmul(graphs, self._in_weight)), n * T, 1)
        recv = dc.mul(in_weight, dc.matmul(h, w_recv))
        send = dc.graph_aggregate(graphs, dc.matmul(h, w_send), n)
        agg = dc.add(recv, send)
        return dc.relu(dc.matmul(dc.concat_cols([agg, h]), self.w_agg[layer]))

    def __call__(self, states: np.ndarray, graphs: Tensor) -> list[Tensor]:
        """All layers ``[h^0, ..., h^L]`` for one sequence under per-step graphs (``T x N^2``)."""
        hs = [self.init_embeddings(states)]
        for layer in range(self.layers):
            hs.append(self.message_pass(hs[-1], graphs, layer))
        return hs


def node_rows(h: Tensor, node: int, steps: int) -> Tensor:
    return dc.slice2d(h, rows=slice(node * steps, (node + 1) * steps))
