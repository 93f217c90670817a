"""Full imitation model: template bank -> causal encoding -> prediction heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoding import CausalEncoder
from .policy import BranchedNet, Discriminator
from .templates import TemplateBank


@dataclass
class ModelConfig:
    n_state: int
    n_action: int
    n_templates: int = 3
    temperature: float = 0.1
    embed_dim: int = 16
    z_dim: int = 16
    layers: int = 2
    hidden: int = 64
    sigma_action: float = 0.1
    sigma_state: float = 0.1
    vanilla: bool = False
    seed: int = 0

    @property
    def n_nodes(self) -> int:
        return self.n_state + self.n_action


@dataclass
class Forward:
    """Per-sequence forward results (tensors are on the active tape, if any)."""
    action_mean: Tensor          # (n_action*T) x 1, action-major
    state_mean: Tensor | None    # (n_state*T) x 1, predicted s_{t+1}
    alpha: Tensor | None         # T x M
    graphs: Tensor | None        # T x N^2
    templates: Tensor | None     # M x N^2 (masked)


def node_major(x: np.ndarray) -> np.ndarray:
    """``T x n`` -> ``(n*T) x 1`` stacked column by column."""
    return np.ascontiguousarray(x.T).reshape(-1, 1)


def previous(actions: np.ndarray) -> np.ndarray:
    prev = np.zeros_like(actions)
    prev[1:] = actions[:-1]
    return prev


class CailModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        if c.vanilla:
            self.bank = None
            self.encoder = None
            self.regressor = None
            self.policy = BranchedNet(c.n_state + 1, c.n_action, rng, c.hidden, "policy")
        else:
            self.bank = TemplateBank(c.n_state, c.n_action, c.n_templates, rng,
                                     temperature=c.temperature, z_dim=c.z_dim)
            self.encoder = CausalEncoder(c.n_state, c.n_action, rng, c.embed_dim, c.layers)
            self.policy = BranchedNet(c.embed_dim + 1, c.n_action, rng, c.hidden, "policy")
            self.regressor = BranchedNet(c.embed_dim + 1, c.n_state, rng, c.hidden, "regress")
        self.disc = Discriminator(c.n_nodes, rng, c.hidden)

    # parameter bookkeeping -------------------------------------------------
    def model_parameters(self) -> list[Tensor]:
        """Everything except the discriminator."""
        params = []
        if self.bank is not None:
            params += self.bank.parameters() + self.encoder.parameters() + self.regressor.parameters()
        return params + self.policy.parameters()

    def disc_parameters(self) -> list[Tensor]:
        return self.disc.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for p in self.model_parameters() + self.disc_parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in named.items():
            a = np.asarray(arrays[name], dtype=float)
            if a.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {a.shape} != model shape {p.shape}")
            p.data = a.copy()

    def config_dict(self) -> dict:
        return asdict(self.config)

    # forward ---------------------------------------------------------------
    def forward(self, states: np.ndarray, actions: np.ndarray) -> Forward:
        """Teacher-forced pass over one sequence: true s_t and a_{t-1} at every step."""
        c = self.config
        T = states.shape[0]
        prev_col = node_major(previous(actions))
        if c.vanilla:
            raw = np.tile(states, (c.n_action, 1))
            mean = self.policy(Tensor(np.hstack([raw, prev_col])), T)
            return Forward(mean, None, None, None, None)

        flat = self.bank.masked()
        z = self.bank.encode(states)
        alpha, graphs = self.bank.select(z, flat)
        h = self.encoder(states, graphs)[-1]
        ns = c.n_state
        h_state = dc.slice2d(h, rows=slice(0, ns * T))
        h_action = dc.slice2d(h, rows=slice(ns * T, None))
        mean = self.policy(dc.concat_cols([h_action, Tensor(prev_col)]), T)
        state_mean = self.regressor(dc.concat_cols([h_state, Tensor(node_major(states))]), T)
        return Forward(mean, state_mean, alpha, graphs, flat)

    def predict_actions(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Evaluation-mode action means, ``T x n_action`` (no sampling)."""
        with dc.no_tape():
            fw = self.forward(states, actions)
        return fw.action_mean.data.reshape(self.config.n_action, -1).T.copy()

    def selection(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Selection weights ``T x M`` and selected graphs ``T x N x N``."""
        if self.bank is None:
            raise ValueError("vanilla model has no template bank")
        n = self.config.n_nodes
        with dc.no_tape():
            alpha, graphs = self.bank.select(self.bank.encode(states))
        return alpha.data.copy(), graphs.data.reshape(-1, n, n)
