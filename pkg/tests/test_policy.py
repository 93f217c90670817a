import math

import numpy as np
import pytest

from cail import diffcore as dc
from cail.diffcore import Tape, Tensor
from cail.model import CailModel, ModelConfig
from cail.policy import (BranchedNet, Discriminator, disc_objective, discriminate, gaussian_entropy,
                         imitation_loss, policy_loglik, regression_loss)

from .fd import check


def net(in_dim=5, branches=2, seed=0) -> BranchedNet:
    return BranchedNet(in_dim, branches, np.random.default_rng(seed), hidden=8)


def zero_out(params):
    for p in params:
        p.data = np.zeros_like(p.data)


# --- heads --------------------------------------------------------------------

def test_zero_weights_output_the_bias():
    n = net()
    zero_out(n.parameters())
    n.head_b.data = np.array([[0.3, -0.7]])
    out = n(Tensor(np.random.default_rng(0).normal(size=(6, 5))), 3).data[:, 0]
    np.testing.assert_array_equal(out, [0.3] * 3 + [-0.7] * 3)


def test_identical_branches_agree():
    n = net()
    n.head_w.data[:, 1] = n.head_w.data[:, 0]
    x = np.random.default_rng(1).normal(size=(4, 5))
    out = n(Tensor(np.vstack([x, x])), 4).data[:, 0]
    np.testing.assert_array_equal(out[:4], out[4:])


def test_evaluation_is_deterministic():
    model = CailModel(ModelConfig(n_state=4, n_action=1, seed=3))
    rng = np.random.default_rng(3)
    s, a = rng.uniform(-1, 1, (10, 4)), rng.uniform(-1, 1, (10, 1))
    np.testing.assert_array_equal(model.predict_actions(s, a), model.predict_actions(s, a))


def test_branch_count_checked():
    with pytest.raises(dc.ShapeError):
        net()(Tensor(np.zeros((5, 5))), 3)


def test_one_branch_loss_leaves_other_head_alone():
    n = net(branches=3)
    x = Tensor(np.random.default_rng(2).normal(size=(12, 5)))
    with Tape() as tape:
        out = n(x, 4)
        loss = dc.sum_(dc.slice2d(out, rows=slice(4, 8)))  # branch 1 only
    tape.backward(loss)
    assert not n.head_w.grad[:, [0, 2]].any() and not n.head_b.grad[:, [0, 2]].any()
    assert n.head_w.grad[:, 1].any()
    assert np.abs(n.trunk.weights[0].grad).sum() > 0  # shared trunk does learn


def test_model_has_one_branch_per_variable():
    model = CailModel(ModelConfig(n_state=8, n_action=2))
    assert model.policy.n_branches == 2 and model.regressor.n_branches == 8


# --- likelihoods ------------------------------------------------------------------

def test_loglik_at_the_mean():
    assert policy_loglik(Tensor(0.0), 0.0, 1.0).item() == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert policy_loglik(Tensor(0.0), 0.0, 1.0).item() == pytest.approx(-0.9189, abs=1e-4)


def test_loglik_one_sigma_is_half_below_max():
    top = policy_loglik(Tensor(1.0), 1.0, 0.1).item()
    assert policy_loglik(Tensor(1.1), 1.0, 0.1).item() == pytest.approx(top - 0.5, abs=1e-12)


def test_loglik_decreases_with_distance():
    vals = [policy_loglik(Tensor(d), 0.0, 0.1).item() for d in (0.0, 0.05, 0.2, 1.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_regression_loss_examples():
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(6, 3))
    perfect = regression_loss(Tensor(obs), obs, 0.1).item()
    assert perfect == pytest.approx(3 * math.log(0.1 * math.sqrt(2 * math.pi)))
    bumped = obs.copy()
    bumped[2, 1] += 0.03
    # averaged over the six steps
    assert regression_loss(Tensor(bumped), obs, 0.1).item() - perfect == pytest.approx(
        0.03 ** 2 / (2 * 0.01) / 6, abs=1e-12)
    p = rng.permutation(6)
    assert regression_loss(Tensor(bumped[p]), obs[p], 0.1).item() == pytest.approx(
        regression_loss(Tensor(bumped), obs, 0.1).item(), abs=1e-12)


def test_entropy_closed_form():
    assert gaussian_entropy(1.0, 2) == pytest.approx(math.log(2 * math.pi * math.e))


# --- discriminator -------------------------------------------------------------

def test_zero_discriminator_is_a_coin():
    d = Discriminator(5, np.random.default_rng(0))
    zero_out(d.parameters())
    p = discriminate(d, np.ones((4, 4)), np.ones((4, 1)))
    np.testing.assert_array_equal(p, 0.5)
    obj = disc_objective(Tensor(p[:, None]), Tensor(p[:, None])).item()
    assert obj == pytest.approx(2 * math.log(0.5)) and obj == pytest.approx(-1.3863, abs=1e-4)


def test_discriminator_probability_in_open_interval():
    d = Discriminator(5, np.random.default_rng(1))
    p = discriminate(d, np.random.default_rng(1).normal(size=(50, 4)) * 5, np.zeros((50, 1)))
    assert np.all((p > 0) & (p < 1))


def test_imitation_loss_at_coin_discriminator():
    rng = np.random.default_rng(0)
    mean = rng.normal(size=(6, 1))
    obs = rng.normal(size=(6, 1))
    d = Tensor(np.full((6, 1), 0.5))
    got = imitation_loss(d, Tensor(mean), obs, 0.1, steps=6).item()
    bc = -policy_loglik(Tensor(mean), obs, 0.1).item() / 6
    assert got == pytest.approx(math.log(0.5) + bc, abs=1e-12)
    # the entropy bonus is a constant
    with_entropy = imitation_loss(d, Tensor(mean), obs, 0.1, entropy_weight=0.5, steps=6).item()
    assert with_entropy == pytest.approx(got - 0.5 * gaussian_entropy(0.1, 1), abs=1e-12)


def test_frozen_discriminator_gets_no_gradient():
    model = CailModel(ModelConfig(n_state=4, n_action=1, seed=1))
    rng = np.random.default_rng(1)
    s, a = rng.uniform(-1, 1, (6, 4)), rng.uniform(-1, 1, (6, 1))
    with Tape() as tape:
        fw = model.forward(s, a)
        d = model.disc(s, dc.reshape(fw.action_mean, 6, 1), frozen=True)
        loss = imitation_loss(d, fw.action_mean, a.reshape(-1, 1), 0.1, steps=6)
    tape.backward(loss)
    assert all(p.grad is None or not p.grad.any() for p in model.disc_parameters())
    assert model.policy.head_w.grad is not None and model.policy.head_w.grad.any()


@pytest.mark.parametrize("seed", range(20))
def test_imitation_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = net(in_dim=3, branches=2, seed=seed)
    d = Discriminator(4, rng, hidden=8)
    x = rng.normal(size=(6, 3))
    s = rng.normal(size=(3, 2))
    obs = rng.normal(size=(6, 1))
    noise = rng.normal(size=(6, 1)) * 0.1

    def build(ts):
        n.head_w = ts[0]
        mean = n(Tensor(x), 3)
        sampled = dc.add(mean, Tensor(noise))
        gen = dc.transpose(dc.reshape(sampled, 2, 3))
        return imitation_loss(d(s, gen, frozen=True), mean, obs, 0.1, steps=3)

    check(build, [n.head_w.data.copy()])
