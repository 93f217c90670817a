"""Run configuration shared by the CLI, training and evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .kuramoto import DatasetConfig


@dataclass
class RunConfig:
    dataset: str = ""
    scale: str = "kura5"
    mode: str = "static"
    seed: int = 0
    # data generation
    n_sequences: int = 500
    length: int = 100
    split_ratio: list = field(default_factory=lambda: [2, 3, 5])
    coupling_strength: float = 10.0
    dt: float = 0.05
    # model
    n_templates: int = 3
    temperature: float = 0.1
    embed_dim: int = 16
    layers: int = 2
    vanilla: bool = False
    # loss weights
    sparsity: float = 1e-4      # lambda_1
    regression: float = 1.0     # gamma_1
    option: float = 0.1         # gamma_2
    entropy: float = 0.0        # lambda
    # optimisation
    lr: float = 0.005
    epochs: int = 1000
    patience: int = 50
    c0: float = 1e-4
    lagrange0: float = 0.0
    lagrangian_rule: str = "paper"
    c_max: float = 1e16
    h_tol: float = 1e-6
    stop_h: float = 1e-8
    # evaluation / export
    threshold: float = 0.05
    closed_loop: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(scale=self.scale, mode=self.mode, seed=self.seed,
                             n_sequences=self.n_sequences, length=self.length,
                             strength=self.coupling_strength, dt=self.dt,
                             split_ratio=tuple(self.split_ratio))

    def validate(self) -> None:
        for name in ("sparsity", "regression", "option", "entropy"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.c0 <= 0:
            raise ValueError("c0 must be > 0")
        if self.lagrangian_rule not in ("paper", "standard"):
            raise ValueError(f"lagrangian_rule must be 'paper' or 'standard', not {self.lagrangian_rule!r}")
        if self.n_templates < 1 or self.epochs < 0 or self.layers < 1:
            raise ValueError("n_templates >= 1, layers >= 1 and epochs >= 0 required")
