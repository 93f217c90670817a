"""End-to-end optimisation: regime pre-clustering, composite loss, epochs, augmented Lagrangian."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .checkpoint import read_checkpoint, write_checkpoint
from .clustering import assign, kmeans
from .config import RunConfig
from .diffcore import Adam, Tape, Tensor
from .kuramoto import TrajectoryDataset, read_dataset
from .model import CailModel, Forward, ModelConfig, node_major, previous
from .policy import disc_objective, imitation_loss, regression_loss
from .templates import acyclicity_reg, acyclicity_value, option_loss, sparsity_reg

log = logging.getLogger(__name__)

SIGMA = 0.25
RHO = 10.0


class TrainingError(RuntimeError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class LossWeights:
    sparsity: float = 1e-4      # lambda_1
    regression: float = 1.0     # gamma_1
    option: float = 0.1         # gamma_2
    entropy: float = 0.0        # lambda

    def __post_init__(self):
        if min(self.sparsity, self.regression, self.option, self.entropy) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainState:
    lagrange: float = 0.0        # lambda_2
    penalty: float = 1e-4        # c
    h_old: float = math.inf
    epoch: int = 0
    rule: str = "paper"
    c_max: float = 1e16
    sigma: float = SIGMA
    rho: float = RHO


def lagrangian_update(state: TrainState, h: float) -> TrainState:
    """Once-per-epoch multiplier/penalty update.

    The multiplier uses the penalty from before this update.  Under the
    ``paper`` rule the penalty grows when ``h <= sigma * h_old``; the
    ``standard`` rule grows it when progress stalls (``h > sigma * h_old``).
    """
    lagrange = state.lagrange + h * state.penalty
    if state.rule == "paper":
        fire = h <= state.sigma * state.h_old
    else:
        fire = h > state.sigma * state.h_old
    penalty = state.penalty
    if fire and penalty * state.rho <= state.c_max:
        penalty = penalty * state.rho
    return replace(state, lagrange=lagrange, penalty=penalty, h_old=h, epoch=state.epoch + 1)


# --- regime labels --------------------------------------------------------

def cluster_features(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.hstack([states, previous(actions)])


def cluster_regimes(dataset: TrajectoryDataset, n_groups: int, seed: int,
                    max_iter: int = 100) -> list[np.ndarray]:
    """Per-sequence integer group labels from k-means on standardized ``[s_t, a_{t-1}]``.

    Centroids and standardization come from the training split only; every
    sequence is then labelled against them.
    """
    if n_groups < 1:
        raise ValueError("need at least one group")
    feats = [cluster_features(s, a) for s, a in zip(dataset.states, dataset.actions)]
    if n_groups == 1:
        return [np.zeros(f.shape[0], dtype=int) for f in feats]
    train = dataset.indices("train") or list(range(len(feats)))
    x = np.vstack([feats[i] for i in train])
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    centers, _ = kmeans((x - mu) / sd, n_groups, np.random.default_rng(seed), max_iter)
    return [assign((f - mu) / sd, centers) for f in feats]


# --- losses ---------------------------------------------------------------

def sample_actions(fw: Forward, sigma: float, rng: np.random.Generator) -> Tensor:
    noise = rng.standard_normal(fw.action_mean.shape) * sigma
    return dc.add(fw.action_mean, Tensor(noise))


def _as_steps(column: Tensor, n_vars: int) -> Tensor:
    steps = column.shape[0] // n_vars
    return dc.transpose(dc.reshape(column, n_vars, steps))


def loss_terms(model: CailModel, fw: Forward, sampled: Tensor, states: np.ndarray,
               actions: np.ndarray, labels: np.ndarray | None, weights: LossWeights,
               state: TrainState) -> tuple[Tensor, dict[str, float]]:
    """Composite objective from a finished forward pass; the discriminator is frozen."""
    cfg = model.config
    T = states.shape[0]
    d_gen = model.disc(states, _as_steps(sampled, cfg.n_action), frozen=True)
    total = imitation_loss(d_gen, fw.action_mean, node_major(actions), cfg.sigma_action,
                           weights.entropy, steps=T)
    parts = {"imitation": total.item()}
    if cfg.vanilla:
        return total, parts

    nxt = np.zeros_like(states)
    nxt[:-1] = states[1:]
    w = np.ones((T, cfg.n_state)) / max(T - 1, 1)
    w[-1] = 0.0
    res = regression_loss(fw.state_mean, node_major(nxt), cfg.sigma_state, node_major(w))
    sparse = sparsity_reg(model.bank, fw.templates)
    dag = acyclicity_reg(model.bank, fw.templates)
    parts.update(regression=res.item(), sparsity=sparse.item(), dag=dag.item())
    terms = [total, dc.scale(res, weights.regression), dc.scale(sparse, weights.sparsity)]
    if labels is not None and weights.option:
        opt = option_loss(fw.alpha, labels)
        parts["option"] = opt.item()
        terms.append(dc.scale(opt, weights.option))
    terms.append(dc.scale(dag, state.lagrange))
    terms.append(dc.scale(dc.square(dag), 0.5 * state.penalty))
    for t in terms[1:]:
        total = dc.add(total, t)
    parts["total"] = total.item()
    if not np.isfinite(parts["total"]):
        raise TrainingError("non-finite loss", dump={"parts": parts, "epoch": state.epoch,
                                                     "lagrange": state.lagrange, "penalty": state.penalty})
    return total, parts


def composite_loss(model: CailModel, states: np.ndarray, actions: np.ndarray,
                   labels: np.ndarray | None, weights: LossWeights, state: TrainState,
                   rng: np.random.Generator) -> Tensor:
    """Full per-sequence objective (forward + losses) on the active tape."""
    fw = model.forward(states, actions)
    sampled = sample_actions(fw, model.config.sigma_action, rng)
    return loss_terms(model, fw, sampled, states, actions, labels, weights, state)[0]


def discriminator_step(model: CailModel, opt: Adam, states: np.ndarray, actions: np.ndarray,
                       generated: np.ndarray) -> float:
    with Tape() as tape:
        obj = disc_objective(model.disc(states, actions), model.disc(states, generated))
        loss = dc.scale(obj, -1.0)
    opt.zero_grad()
    tape.backward(loss)
    opt.step()
    return obj.item()


@dataclass
class Trainer:
    model: CailModel
    weights: LossWeights
    state: TrainState
    lr: float
    seed: int = 0
    opt: Adam = field(init=False)
    disc_opt: Adam = field(init=False)
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.opt = Adam(self.model.model_parameters(), self.lr)
        self.disc_opt = Adam(self.model.disc_parameters(), self.lr)
        self.rng = np.random.default_rng(self.seed + 7919)

    def train_epoch(self, dataset: TrajectoryDataset, labels: list[np.ndarray] | None) -> dict:
        """One pass over shuffled training sequences: discriminator step, then model step."""
        cfg = self.model.config
        order = dataset.indices("train")
        if not order:
            raise ValueError("dataset has no training sequences")
        order = [order[i] for i in self.rng.permutation(len(order))]
        sums: dict[str, float] = {}
        for idx in order:
            s, a = dataset.states[idx], dataset.actions[idx]
            with Tape() as tape:
                fw = self.model.forward(s, a)
                sampled = sample_actions(fw, cfg.sigma_action, self.rng)
                generated = sampled.data.reshape(cfg.n_action, -1).T
                d_obj = discriminator_step(self.model, self.disc_opt, s, a, generated)
                total, parts = loss_terms(self.model, fw, sampled, s, a,
                                          None if labels is None else labels[idx],
                                          self.weights, self.state)
            self.opt.zero_grad()
            tape.backward(total)
            self.opt.step()
            parts["disc_objective"] = d_obj
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        return {k: v / len(order) for k, v in sums.items()}


def action_loglik(model: CailModel, dataset: TrajectoryDataset, split: str) -> float:
    """Mean per-step expert-action log-likelihood (teacher forced)."""
    sigma = model.config.sigma_action
    const = -math.log(sigma * math.sqrt(2 * math.pi))
    total, steps = 0.0, 0
    for i in dataset.indices(split):
        pred = model.predict_actions(dataset.states[i], dataset.actions[i])
        err = (pred - dataset.actions[i]) ** 2
        total += float((-err / (2 * sigma ** 2) + const).sum())
        steps += err.shape[0]
    return total / max(steps, 1)


def model_config_from(run: RunConfig, dataset: TrajectoryDataset) -> ModelConfig:
    return ModelConfig(n_state=dataset.n_state, n_action=dataset.n_action,
                       n_templates=run.n_templates, temperature=run.temperature,
                       embed_dim=run.embed_dim, layers=run.layers, vanilla=run.vanilla,
                       seed=run.seed)


def snapshot(model: CailModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters().items()}


@dataclass
class FitResult:
    model: CailModel
    report: dict
    labels: list[np.ndarray] | None


def fit(run: RunConfig, dataset: TrajectoryDataset | None = None, progress=None) -> FitResult:
    """Cluster, then train for up to ``run.epochs`` epochs with Lagrangian updates.

    Keeps the parameters of the best-validation epoch among those whose
    acyclicity value is below ``run.h_tol`` (the final epoch if none is).
    """
    run.validate()
    if dataset is None:
        dataset = read_dataset(run.dataset)
    if not dataset.indices("train"):
        raise ValueError("dataset has no training split")
    model = CailModel(model_config_from(run, dataset))
    weights = LossWeights(run.sparsity, run.regression, run.option, run.entropy)
    state = TrainState(lagrange=run.lagrange0, penalty=run.c0, rule=run.lagrangian_rule,
                       c_max=run.c_max)
    labels = None if run.vanilla else cluster_regimes(dataset, run.n_templates, run.seed)
    trainer = Trainer(model, weights, state, run.lr, run.seed)

    history = []
    best = {"val": -math.inf, "epoch": None, "params": None}
    best_any = -math.inf
    stale = 0
    for epoch in range(run.epochs):
        stats = trainer.train_epoch(dataset, labels)
        h = 0.0 if run.vanilla else acyclicity_value(model.bank.matrices())
        trainer.state = lagrangian_update(trainer.state, h)
        val = action_loglik(model, dataset, "val") if dataset.indices("val") else -stats["imitation"]
        history.append({"epoch": epoch + 1, "h": h, "lagrange": trainer.state.lagrange,
                        "penalty": trainer.state.penalty, "val_loglik": val,
                        **{f"train_{k}": v for k, v in stats.items()}})
        if progress:
            progress(history[-1])
        log.info("epoch %d h=%.3g val=%.4f c=%.3g", epoch + 1, h, val, trainer.state.penalty)
        if val > best_any:
            best_any, stale = val, 0
        else:
            stale += 1
        if h < run.h_tol and val > best["val"]:
            best = {"val": val, "epoch": epoch + 1, "params": snapshot(model)}
        if stale >= run.patience and h < run.stop_h:
            log.info("early stop at epoch %d", epoch + 1)
            break

    if best["params"] is not None:
        model.load_arrays(best["params"])
    final_h = 0.0 if run.vanilla else acyclicity_value(model.bank.matrices())
    report = {
        "config": run.to_dict(),
        "trained": bool(history),
        "epochs_run": len(history),
        "best_epoch": best["epoch"] if best["epoch"] is not None else len(history),
        "final": {"h": final_h, "lagrange": trainer.state.lagrange, "penalty": trainer.state.penalty,
                  "val_loglik": action_loglik(model, dataset, "val") if dataset.indices("val") else None},
        "defaults": {"lr": run.lr, "sparsity": run.sparsity, "c0": run.c0},
        "history": history,
    }
    return FitResult(model, report, labels)


# --- checkpoints ----------------------------------------------------------

def save_model(path, model: CailModel, run: RunConfig, report: dict) -> None:
    header = {
        "config": run.to_dict(),
        "model": model.config_dict(),
        "epoch": report.get("epochs_run", 0),
        "metrics": report.get("final", {}),
        "lagrange": report.get("final", {}).get("lagrange"),
        "penalty": report.get("final", {}).get("penalty"),
    }
    write_checkpoint(path, header, snapshot(model))


def load_model(path) -> tuple[CailModel, RunConfig, dict]:
    header, arrays = read_checkpoint(path)
    model = CailModel(ModelConfig(**header["model"]))
    model.load_arrays(arrays)
    return model, RunConfig.from_dict(header["config"]), header
