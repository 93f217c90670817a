import numpy as np
import pytest

from cail import diffcore as dc
from cail.diffcore import ShapeError, Tensor, no_tape
from cail.encoding import CausalEncoder, node_rows

from .fd import check

N_STATE, N_ACTION, D = 4, 1, 16
N = N_STATE + N_ACTION


def encoder(seed=0, layers=2) -> CausalEncoder:
    return CausalEncoder(N_STATE, N_ACTION, np.random.default_rng(seed), dim=D, layers=layers)


def graphs_for(g: np.ndarray, steps: int) -> Tensor:
    return Tensor(np.tile(g.reshape(1, -1), (steps, 1)))


def layer_one(enc, h0: np.ndarray, g: np.ndarray, steps: int) -> np.ndarray:
    with no_tape():
        return enc.message_pass(Tensor(h0), graphs_for(g, steps), 0).data


def test_zero_states_give_zero_state_rows():
    enc = encoder()
    h = enc.init_embeddings(np.zeros((3, N_STATE))).data
    assert not h[:N_STATE * 3].any()


def test_state_rows_are_linear():
    enc = encoder()
    rng = np.random.default_rng(1)
    s = rng.normal(size=(3, N_STATE))
    s2 = s.copy()
    s2[:, 2] *= 2
    h, h2 = enc.init_embeddings(s).data, enc.init_embeddings(s2).data
    rows = slice(2 * 3, 3 * 3)
    np.testing.assert_allclose(h2[rows], 2 * h[rows], atol=1e-15)
    np.testing.assert_array_equal(np.delete(h2, range(6, 9), axis=0), np.delete(h, range(6, 9), axis=0))


def test_fresh_action_rows_are_zero():
    enc = encoder()
    h = enc.init_embeddings(np.random.default_rng(0).normal(size=(4, N_STATE))).data
    assert not h[N_STATE * 4:].any()


def test_state_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        encoder().init_embeddings(np.zeros((3, N_STATE + 1)))


def test_embedding_row_count_mismatch_rejected():
    enc = encoder()
    with pytest.raises(ShapeError):
        enc.message_pass(Tensor(np.zeros((N * 3 + 1, D))), graphs_for(np.zeros((N, N)), 3), 0)


def test_no_edges_means_no_messages():
    enc = encoder()
    rng = np.random.default_rng(2)
    T = 3
    h0 = rng.normal(size=(N * T, D))
    out = layer_one(enc, h0, np.zeros((N, N)), T)
    w = enc.w_agg[0].data
    expected = np.maximum(np.hstack([np.zeros_like(h0), h0]) @ w, 0)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    # perturbing one node changes only that node
    h1 = h0.copy()
    h1[node_rows_idx(1, T)] += 1.0
    changed = np.abs(layer_one(enc, h1, np.zeros((N, N)), T) - out).max(axis=1) > 0
    assert set(np.flatnonzero(changed)) <= set(node_rows_idx(1, T))


def node_rows_idx(node: int, steps: int) -> list[int]:
    return list(range(node * steps, (node + 1) * steps))


def test_single_edge_reaches_only_its_target():
    enc = encoder(seed=3)
    rng = np.random.default_rng(3)
    T = 2
    g = np.zeros((N, N))
    g[1, 3] = 0.8  # 1 -> 3
    h0 = rng.normal(size=(N * T, D))
    base = layer_one(enc, h0, g, T)
    h1 = h0.copy()
    h1[node_rows_idx(1, T)] += rng.normal(size=(T, D))
    diff = np.abs(layer_one(enc, h1, g, T) - base).max(axis=1)
    touched = {i for i in range(N) if diff[node_rows_idx(i, T)].max() > 0}
    assert touched == {1, 3}


def test_edge_weight_scales_aggregated_message():
    enc = encoder(seed=4)
    rng = np.random.default_rng(4)
    T = 2
    # W_agg = [I; 0] exposes relu(aggregated message)
    enc.w_agg[0].data = np.vstack([np.eye(D), np.zeros((D, D))])
    g = np.zeros((N, N))
    g[0, 2] = 0.3
    h0 = np.abs(rng.normal(size=(N * T, D)))
    enc.w_edge[0].data = np.abs(enc.w_edge[0].data)  # keep messages positive, so relu is linear
    one = layer_one(enc, h0, g, T)
    two = layer_one(enc, h0, 2 * g, T)
    np.testing.assert_allclose(two, 2 * one, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_influence_is_confined_to_ancestors(seed):
    rng = np.random.default_rng(seed)
    enc = encoder(seed=seed, layers=2)
    T = 2
    g = (rng.random((N, N)) < 0.3) * rng.normal(size=(N, N))
    np.fill_diagonal(g, 0)
    s = rng.normal(size=(T, N_STATE))
    enc.table.data[N_STATE:] = rng.normal(size=(N_ACTION, D))
    src = int(rng.integers(N_STATE))
    with no_tape():
        base = enc(s, graphs_for(g, T))[-1].data
        s2 = s.copy()
        s2[:, src] += 1.0
        moved = enc(s2, graphs_for(g, T))[-1].data
    reach = {src}
    adj = g != 0
    for _ in range(2):
        reach |= {i for j in reach for i in np.flatnonzero(adj[j])}
    for i in range(N):
        if i not in reach:
            np.testing.assert_array_equal(moved[node_rows_idx(i, T)], base[node_rows_idx(i, T)])


def test_embeddings_are_deterministic():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(5, N_STATE))
    g = graphs_for(rng.normal(size=(N, N)), 5)
    a = [h.data for h in encoder(seed=9)(s, g)]
    b = [h.data for h in encoder(seed=9)(s, g)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_node_rows_slice():
    h = Tensor(np.arange(30.0).reshape(10, 3))
    np.testing.assert_array_equal(node_rows(h, 1, 5).data, h.data[5:10])


@pytest.mark.parametrize("seed", range(20))
def test_message_passing_gradients(seed):
    rng = np.random.default_rng(seed)
    enc = encoder(seed=seed)
    T = 3
    s = rng.normal(size=(T, N_STATE))
    graphs = rng.normal(scale=0.5, size=(T, N * N))
    table = rng.normal(size=(N, D))
    w_edge = enc.w_edge[0].data.copy()
    target = rng.normal(size=(N * T, D))

    def build(ts):
        enc.table, enc.w_edge[0] = ts[0], ts[1]
        h = enc(s, ts[2])[-1]
        return dc.sum_(dc.mul(h, Tensor(target)))

    check(build, [table, w_edge, graphs])
