import hashlib
import math

import numpy as np
import pytest

from cail.diffcore import Tensor, trace_expm_hadamard
from cail.kuramoto import (DatasetConfig, OscillatorSystem, SimulationError, make_dataset,
                           read_dataset, sample_dag, simulate, write_dataset)


def small(**kw) -> DatasetConfig:
    base = dict(n_sequences=12, length=60)
    base.update(kw)
    return DatasetConfig(**base)


# --- graph sampler ------------------------------------------------------------

def test_dag_edge_prob_zero_is_empty():
    assert not sample_dag(6, 0.0, 1).any()


def test_dag_edge_prob_one_is_total_order():
    g = sample_dag(3, 1.0, 4)
    assert g.sum() == 3
    order = np.argsort(g.sum(axis=0))  # in-degree 0, 1, 2
    assert g[order[0], order[1]] == g[order[0], order[2]] == g[order[1], order[2]] == 1


def test_dag_mean_edge_count():
    rng = np.random.default_rng(0)
    counts = [sample_dag(10, 0.5, rng).sum() for _ in range(1000)]
    assert abs(np.mean(counts) - 22.5) < 2


@pytest.mark.parametrize("seed", range(10))
def test_dag_is_acyclic(seed):
    g = sample_dag(8, 0.6, seed)
    assert np.all(np.diag(g) == 0)
    assert abs(trace_expm_hadamard(Tensor(g)).item() - 8) < 1e-10


def test_dag_rejects_single_node():
    with pytest.raises(ValueError):
        sample_dag(1, 0.5, 0)


# --- integrator ---------------------------------------------------------------

def test_uncoupled_oscillators_drift_linearly():
    omega = np.array([1.0, 2.5, -0.3])
    sys_ = OscillatorSystem(omega, np.zeros((3, 3)), strength=0.0, dt=0.05)
    theta0 = np.array([0.1, 2.0, 4.0])
    phases = simulate(sys_, 200, theta0)
    t = np.arange(200)[:, None] * 0.05
    # per-step error bound times the number of steps
    assert np.abs(phases - (theta0 + omega * t)).max() < 1e-8 * 200


def test_strong_coupling_locks_phase():
    g = np.array([[0.0, 1.0], [0.0, 0.0]])
    sys_ = OscillatorSystem(np.zeros(2), g, strength=5.0, dt=0.05)
    phases = simulate(sys_, 400, [0.0, 2.0])
    gap = np.abs(np.sin(phases[:, 1] - phases[:, 0]))
    assert gap[-1] < 1e-6 and gap[-1] < gap[0]


def test_integrator_converges_when_step_halved():
    rng = np.random.default_rng(3)
    g = sample_dag(5, 0.5, rng)
    omega = rng.uniform(1, 3, 5)
    theta0 = rng.uniform(0, 2 * math.pi, 5)
    coarse = simulate(OscillatorSystem(omega, g, 2.0, 0.05), 101, theta0)[-1]
    fine = simulate(OscillatorSystem(omega, g, 2.0, 0.025), 201, theta0)[-1]
    assert np.abs(coarse - fine).max() < 1e-5


def test_non_finite_phase_aborts():
    sys_ = OscillatorSystem(np.array([1.0, np.inf]), np.zeros((2, 2)))
    with pytest.raises(SimulationError, match="step 1"):
        simulate(sys_, 5, [0.0, 0.0])


def test_system_rejects_self_coupling():
    with pytest.raises(ValueError):
        OscillatorSystem(np.ones(2), np.eye(2))


# --- datasets -------------------------------------------------------------------

def test_static_dataset_shapes_and_labels():
    ds = make_dataset(small(scale="kura5", mode="static"))
    assert (ds.n_state, ds.n_action) == (4, 1)
    assert len(ds.gt_graphs) == 1 and ds.gt_graphs[0].shape == (5, 5)
    assert all(r.shape == (60,) and not r.any() for r in ds.regimes)
    assert all(s.shape == (60, 4) and a.shape == (60, 1) for s, a in zip(ds.states, ds.actions))


def test_kura10_dimensions():
    ds = make_dataset(small(scale="kura10", n_sequences=3))
    assert (ds.n_state, ds.n_action) == (8, 2)


def test_features_are_bounded():
    ds = make_dataset(small(mode="vary"))
    assert max(np.abs(s).max() for s in ds.states) <= 1
    assert max(np.abs(a).max() for a in ds.actions) <= 1


def test_vary_labels_form_long_runs():
    ds = make_dataset(small(mode="vary", length=100, n_sequences=30))
    assert len(ds.gt_graphs) == 3
    for r in ds.regimes:
        assert r.min() >= 0 and r.max() < 3
        # neighbouring segments may share a graph and merge, so runs are >= 25 but may exceed 50
        cuts = np.flatnonzero(np.diff(r)) + 1
        runs = np.diff(np.concatenate([[0], cuts, [len(r)]]))
        assert runs.min() >= 25


def test_segment_lengths_are_within_bounds():
    from cail.kuramoto import _segments
    rng = np.random.default_rng(0)
    for length in (50, 77, 100, 250):
        for _ in range(50):
            runs = _segments(rng, length, 25, 50)
            assert sum(runs) == length
            assert min(runs) >= 25 and max(runs) <= 50


def test_coupling_switches_at_segment_boundaries():
    cfg = small(mode="vary", n_sequences=20, strength=10.0)
    ds = make_dataset(cfg)
    idx = next(i for i, r in enumerate(ds.regimes) if len(set(r.tolist())) > 1)
    labels = ds.regimes[idx]
    switch = int(np.flatnonzero(np.diff(labels))[0]) + 1
    # regenerate the sequence's draws from its own seed
    rng = np.random.default_rng(cfg.seed + idx)
    omega = rng.uniform(*cfg.omega_range, size=5)
    theta0 = rng.uniform(0.0, 2.0 * math.pi, size=5)
    first = ds.gt_graphs[labels[0]]
    frozen = np.sin(simulate(OscillatorSystem(omega, first, cfg.strength, cfg.dt), cfg.length, theta0))
    joint = np.hstack([ds.states[idx], ds.actions[idx]])
    np.testing.assert_allclose(joint[:switch + 1], frozen[:switch + 1], atol=1e-12)
    assert np.abs(joint[switch + 1:] - frozen[switch + 1:]).max() > 1e-6


def test_split_ratio():
    ds = make_dataset(small(n_sequences=100, length=5))
    assert [ds.splits.count(k) for k in ("train", "val", "test")] == [20, 30, 50]


def test_unknown_scale_or_mode_rejected():
    with pytest.raises(ValueError, match="scale"):
        make_dataset(small(scale="kura7"))
    with pytest.raises(ValueError, match="mode"):
        make_dataset(small(mode="drift"))


def test_ground_truth_graphs_acyclic():
    ds = make_dataset(small(mode="vary", scale="kura10", n_sequences=2))
    for g in ds.gt_graphs:
        assert abs(trace_expm_hadamard(Tensor(g)).item() - 10) < 1e-10


def test_file_round_trip(tmp_path):
    ds = make_dataset(small(mode="vary", n_sequences=5))
    path = tmp_path / "d.jsonl"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert back.splits == ds.splits and back.mode == "vary"
    for a, b in zip(ds.states, back.states):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(ds.gt_graphs, back.gt_graphs):
        np.testing.assert_array_equal(a, b)
    header = path.read_text().splitlines()[0]
    for key in ("format_version", "scale", "mode", "n_state", "n_action", "M_truth", "gt_graphs", "seed"):
        assert f'"{key}"' in header


def test_same_seed_gives_identical_bytes(tmp_path):
    digests = []
    for k in range(2):
        path = tmp_path / f"d{k}.jsonl"
        write_dataset(make_dataset(small(scale="kura10", mode="vary", n_sequences=6, seed=11)), path)
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_different_seed_changes_data():
    a = make_dataset(small(seed=1, n_sequences=2))
    b = make_dataset(small(seed=2, n_sequences=2))
    assert not np.array_equal(a.states[0], b.states[0])
