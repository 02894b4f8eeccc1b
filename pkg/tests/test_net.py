"""Network tests: path registry, attention blocks, batch/single equivalence."""

import numpy as np
import pytest

from morphogen import numcore as nc
from morphogen.config import MorphConfig, NetConfig
from morphogen.morphology import all_paths
from morphogen.net import MorphNet, PaddedBatch, RegistryError, TopoRegistry

from helpers import random_graph

SMALL = NetConfig(d_model=16, n_blocks=2, n_heads=2, value_d_model=16,
                  value_n_blocks=1, registry_capacity=32)


def make_net(seed=0, cfg=SMALL):
    return MorphNet(cfg, seed=seed)


def obs_for(graph, rng):
    return rng.uniform(-1, 1, size=(graph.n_limbs(), 10))


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

def test_registry_same_path_same_row_across_graphs():
    net = make_net()
    rng = np.random.default_rng(0)
    g1 = random_graph(rng)
    g2 = random_graph(rng)
    rows1 = {p: r for p, r in zip(all_paths(g1), net.rows_for(all_paths(g1)))}
    rows2 = {p: r for p, r in zip(all_paths(g2), net.rows_for(all_paths(g2)))}
    for p in set(rows1) & set(rows2):
        assert rows1[p] == rows2[p]
    # injectivity over all distinct allocated paths
    all_rows = list(rows1.values()) + [rows2[p] for p in rows2 if p not in rows1]
    assert len(set(all_rows)) == len(all_rows)


def test_registry_overflow_is_hard_error():
    reg = TopoRegistry(capacity=3, dim=4)
    reg.allocate((1,))
    reg.allocate((2,))
    with pytest.raises(RegistryError):
        reg.allocate((3,))


def test_registry_miss_queue_and_sync():
    net = make_net()
    net.alloc_on_miss = False
    rows = net.rows_for([(), (1,), (1, 1)])
    assert np.array_equal(rows, [0, 0, 0])  # reserved fallback row
    assert len(net.miss_queue) == 3
    added = net.sync_misses()
    assert added == 3
    rows2 = net.rows_for([(), (1,), (1, 1)])
    assert 0 not in rows2


def test_zero_obs_token_equals_path_embedding():
    # With zero observations and zero projection bias the pre-block token is
    # exactly the path's embedding row.
    net = make_net()
    row = net.registry.allocate((1,))
    net.registry.table.data[row] = np.arange(16) * 0.01
    trunk = net.trunks["topo"]
    obs = nc.tensor(np.zeros((1, 1, 10)))
    tok = nc.add(trunk.proj(obs), nc.embedding(net.registry.table,
                                               np.array([[row]], dtype=np.intp)))
    assert np.array_equal(tok.data[0, 0], net.registry.table.data[row])


# ---------------------------------------------------------------------------
# attention behavior
# ---------------------------------------------------------------------------

def test_single_token_attention_weight_is_one():
    net = make_net()
    net.captured_attention = []
    obs = np.zeros((1, 10))
    net.forward_single(obs, [()], stage=0)
    for attn in net.captured_attention:
        assert np.allclose(attn, 1.0)
        assert attn.shape[-2:] == (1, 1)


def test_identical_tokens_identical_outputs():
    net = make_net()
    obs = np.tile(np.linspace(-1, 1, 10), (3, 1))
    paths = [(5,), (5,), (5,)]  # same path -> same embedding -> identical tokens
    head, _ = net.forward_single(obs, paths, stage=0)
    assert np.allclose(head[0], head[1]) and np.allclose(head[1], head[2])


def test_masked_column_blocks_information_flow():
    # Perturbation oracle: randomize a masked token; other outputs must not move.
    net = make_net()
    rng = np.random.default_rng(3)
    obs = rng.uniform(-1, 1, (2, 4, 10))
    obs[1, 2:] = 0.0
    pad = np.array([[1.0, 1, 1, 1], [1, 1, 0, 0]])
    batch = PaddedBatch(obs.copy(), pad, [4, 2])
    paths = [[(), (1,), (1, 1), (2,)], [(), (1,)]]
    out1, val1, _ = net.forward_batch(batch, paths, stage=2)
    obs2 = obs.copy()
    obs2[1, 2:] = rng.uniform(-5, 5, (2, 10))  # scramble padded slots
    out2, val2, _ = net.forward_batch(PaddedBatch(obs2, pad, [4, 2]), paths, stage=2)
    assert np.array_equal(out1[1, :2], out2[1, :2])
    assert val1[1] == val2[1]
    assert np.array_equal(out1[0], out2[0])


def test_fully_masked_row_raises():
    with pytest.raises(nc.MaskError):
        nc.softmax_rows(nc.tensor(np.full((1, 3), -np.inf)))


# ---------------------------------------------------------------------------
# stage heads and value
# ---------------------------------------------------------------------------

def test_stage_head_dims():
    net = make_net()
    rng = np.random.default_rng(1)
    g = random_graph(rng)
    obs = obs_for(g, rng)
    paths = all_paths(g)
    for stage, dim in ((0, 3), (1, 4), (2, 1)):
        head, value = net.forward_single(obs, paths, stage)
        assert head.shape == (g.n_limbs(), dim)
        assert isinstance(value, float)


def test_value_reads_root_token_only():
    # Head-input surgery: perturb final tokens at non-root positions; the
    # value scalar must not change.
    net = make_net()
    rng = np.random.default_rng(2)
    g = random_graph(rng)
    obs = obs_for(g, rng)
    rows = net.rows_for(all_paths(g))
    with nc.no_grad():
        tokens = net.value_trunks["ctrl"](nc.tensor(obs[None]), rows[None],
                                          net.registry.table)
        head = net.value_heads["ctrl"]
        v_ref = head(nc.take(tokens, np.array([0]), axis=1)).data.ravel()
        mutated = tokens.data.copy()
        mutated[0, 1:] += rng.uniform(1.0, 2.0, size=mutated[0, 1:].shape)
        v_mut = head(nc.take(nc.tensor(mutated), np.array([0]), axis=1)).data.ravel()
    assert np.array_equal(v_ref, v_mut)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def test_padding_matrix_definition():
    items = [np.zeros((3, 10)), np.zeros((1, 10))]
    batch = PaddedBatch.from_items(items)
    assert batch.states.shape == (2, 3, 10)
    assert np.array_equal(batch.pad, [[1, 1, 1], [1, 0, 0]])


def test_batch_equals_single_forward():
    net = make_net()
    rng = np.random.default_rng(5)
    graphs = [random_graph(rng) for _ in range(6)]
    obs_list = [obs_for(g, rng) for g in graphs]
    paths_list = [all_paths(g) for g in graphs]
    for stage in (0, 1, 2):
        batch = PaddedBatch.from_items(obs_list)
        _, values, trimmed = net.forward_batch(batch, paths_list, stage)
        for i, (o, p) in enumerate(zip(obs_list, paths_list)):
            head_s, value_s = net.forward_single(o, p, stage)
            assert np.max(np.abs(trimmed[i] - head_s)) < 1e-10
            assert abs(values[i] - value_s) < 1e-10


def test_batch_permutation_equivariance():
    net = make_net()
    rng = np.random.default_rng(6)
    graphs = [random_graph(rng) for _ in range(4)]
    obs_list = [obs_for(g, rng) for g in graphs]
    paths_list = [all_paths(g) for g in graphs]
    out, vals, _ = net.forward_batch(PaddedBatch.from_items(obs_list), paths_list, 2)
    perm = [2, 0, 3, 1]
    out_p, vals_p, _ = net.forward_batch(
        PaddedBatch.from_items([obs_list[i] for i in perm]),
        [paths_list[i] for i in perm], 2)
    lm = max(o.shape[0] for o in obs_list)
    for j, i in enumerate(perm):
        li = obs_list[i].shape[0]
        assert np.allclose(out_p[j, :li], out[i, :li], atol=1e-12)
        assert np.isclose(vals_p[j], vals[i], atol=1e-12)


def test_subtree_alignment_shares_embedding_rows():
    # Graphs sharing a subtree assign identical rows to the shared limbs,
    # and fresh rows to paths unique to either graph.
    net = make_net()
    rng = np.random.default_rng(7)
    cfg = MorphConfig()
    base = random_graph(rng, cfg, n_steps=3)
    from morphogen.morphology import apply_topo_actions
    a1 = rng.integers(0, 3, size=base.n_limbs())
    a2 = rng.integers(0, 3, size=base.n_limbs())
    g1, _ = apply_topo_actions(base, a1, cfg)
    g2, _ = apply_topo_actions(base, a2, cfg)
    p1, p2 = all_paths(g1), all_paths(g2)
    r1 = dict(zip(p1, net.rows_for(p1)))
    r2 = dict(zip(p2, net.rows_for(p2)))
    shared = set(p1) & set(p2)
    assert shared  # base paths survive both edits
    for p in shared:
        assert r1[p] == r2[p]
    distinct = {**r1, **r2}
    assert len(set(distinct.values())) == len(distinct)


def test_token_permutation_equivariance():
    # attention is symmetric over tokens; only the path embeddings carry
    # position, and they travel with their tokens under permutation
    net = make_net()
    rng = np.random.default_rng(9)
    obs = rng.uniform(-1, 1, (4, 10))
    paths = [(), (1,), (1, 1), (2,)]
    head, _ = net.forward_single(obs, paths, stage=0)
    perm = [2, 0, 3, 1]
    head_p, _ = net.forward_single(obs[perm], [paths[i] for i in perm], stage=0)
    assert np.allclose(head_p, head[perm], atol=1e-12)


def test_share_policy_trunk_switch():
    cfg_shared = SMALL
    cfg_split = NetConfig(**{**SMALL.__dict__, "share_policy_trunk": False})
    shared, split = MorphNet(cfg_shared, 0), MorphNet(cfg_split, 0)
    assert split.n_params() > shared.n_params()
    assert shared.trunks["topo"] is shared.trunks["ctrl"]
    assert split.trunks["topo"] is not split.trunks["ctrl"]


def test_snapshot_roundtrip():
    net = make_net(seed=1)
    net.registry.allocate((1,))
    net.registry.allocate((1, 2))
    snap = net.snapshot()
    other = make_net(seed=2)
    other.load_snapshot(snap)
    for name in net.params:
        assert np.array_equal(net.params[name].data, other.params[name].data)
    assert other.registry.snapshot_map() == net.registry.snapshot_map()
