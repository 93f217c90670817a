"""Prediction heads: branched policy, auxiliary state regression, discriminator."""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import MLP, glorot, zeros

LOG_FLOOR = 1e-12


class BranchedNet:
    """Shared two-layer relu trunk with one linear output per branch.

    Inputs for all branches are stacked branch-major: rows ``b*T .. (b+1)*T-1``
    belong to branch b.  Each branch reads only its own output column.
    """

    def __init__(self, in_dim: int, n_branches: int, rng: np.random.Generator,
                 hidden: int = 64, name: str = "net"):
        self.n_branches = n_branches
        self.trunk = MLP([in_dim, hidden, hidden], rng, f"{name}.trunk")
        self.head_w = glorot(rng, hidden, n_branches, f"{name}.head_w")
        self.head_b = zeros(1, n_branches, f"{name}.head_b")
        self._masks: dict[int, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + [self.head_w, self.head_b]

    def _mask(self, steps: int) -> Tensor:
        if steps not in self._masks:
            self._masks[steps] = Tensor(np.kron(np.eye(self.n_branches), np.ones((steps, 1))))
        return self._masks[steps]

    def __call__(self, x: Tensor, steps: int) -> Tensor:
        if x.shape[0] != self.n_branches * steps:
            raise dc.ShapeError(f"expected {self.n_branches}x{steps} rows, got {x.shape[0]}")
        feat = dc.relu(self.trunk(x))
        out = dc.add(dc.matmul(feat, self.head_w), self.head_b)
        return dc.sum_(dc.mul(out, self._mask(steps)), axis=1)


class Discriminator:
    """Three-layer perceptron on ``[s, a]`` producing a logit."""

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden: int = 64):
        self.net = MLP([in_dim, hidden, hidden, 1], rng, "disc")

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def logits(self, states, actions, frozen: bool = False) -> Tensor:
        s = states if isinstance(states, Tensor) else Tensor(states)
        a = actions if isinstance(actions, Tensor) else Tensor(actions)
        return self.net(dc.concat_cols([s, a]), frozen=frozen)

    def __call__(self, states, actions, frozen: bool = False) -> Tensor:
        return dc.sigmoid(self.logits(states, actions, frozen))


def discriminate(disc: Discriminator, states, actions) -> np.ndarray:
    with dc.no_tape():
        return disc(np.atleast_2d(states), np.atleast_2d(actions)).data[:, 0].copy()


def log_one_minus(p: Tensor) -> Tensor:
    return dc.log(dc.clamp_min(dc.sub(Tensor(1.0), p), LOG_FLOOR))


def log_clamped(p: Tensor) -> Tensor:
    return dc.log(dc.clamp_min(p, LOG_FLOOR))


def gaussian_logpdf(mean: Tensor, target, sigma: float) -> Tensor:
    """Elementwise Gaussian log density of ``target`` under ``N(mean, sigma^2)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    target = target if isinstance(target, Tensor) else Tensor(target)
    sq = dc.square(dc.sub(mean, target))
    const = -math.log(sigma * math.sqrt(2.0 * math.pi))
    return dc.add(dc.scale(sq, -0.5 / sigma ** 2), Tensor(const))


def policy_loglik(mean: Tensor, observed, sigma: float) -> Tensor:
    """Summed log density over all entries (action dims, and steps if stacked)."""
    return dc.sum_(gaussian_logpdf(mean, observed, sigma))


def regression_loss(mean: Tensor, observed, sigma: float, weights=None) -> Tensor:
    """Negative log-likelihood of next states, summed over dims and averaged over steps.

    ``mean``/``observed`` are ``T x n`` (one column per state variable), or a
    stacked column with ``weights`` marking which rows count and how much.
    """
    lp = gaussian_logpdf(mean, observed, sigma)
    if weights is None:
        return dc.scale(dc.sum_(lp), -1.0 / mean.shape[0])
    return dc.scale(dc.sum_(dc.mul(lp, Tensor(weights))), -1.0)


def gaussian_entropy(sigma: float, dims: int) -> float:
    return dims * (0.5 * math.log(2.0 * math.pi * math.e * sigma ** 2))


def disc_objective(d_expert: Tensor, d_generated: Tensor) -> Tensor:
    """``E log D(expert) + E log(1 - D(generated))``; the discriminator ascends this."""
    return dc.add(dc.mean(log_clamped(d_expert)), dc.mean(log_one_minus(d_generated)))


def imitation_loss(d_generated: Tensor, mean: Tensor, observed, sigma: float,
                   entropy_weight: float = 0.0, steps: int | None = None) -> Tensor:
    """Adversarial term on generated actions, minus entropy bonus, minus expert log-likelihood.

    ``d_generated`` must come from a frozen discriminator.  The log-likelihood
    is summed over action dims and averaged over ``steps``.
    """
    steps = steps or d_generated.shape[0]
    adv = dc.mean(log_one_minus(d_generated))
    n_dims = mean.data.size // steps
    ll = dc.scale(policy_loglik(mean, observed, sigma), 1.0 / steps)
    out = dc.sub(adv, ll)
    if entropy_weight:
        # closed form under fixed sigma: a constant, no gradient
        out = dc.sub(out, Tensor(entropy_weight * gaussian_entropy(sigma, n_dims)))
    return out
