import numpy as np
import pytest

from conftest import random_graph
from oracles import (conv_tensors, dense_gcn, dense_kagcn, edge_loop, gcn_loop, gin_loop,
                     random_conv, random_kan)
from kagnn.autodiff import BatchNormParams, Tensor, grad_check, silu
from kagnn.errors import ConfigError, DimensionError
from kagnn.graph import Graph, batch_graphs, permute_graph
from kagnn.kan import KanLayerParams, kan_layer_forward, kan_param_count
from kagnn.models import (LAYER_KINDS, MLP, ModelConfig, analytic_parameter_count, apply_head,
                          apply_layer, build_model, check_head_target, edgecnn_layer,
                          gcn_aggregate, gcn_layer, gin_aggregate, gin_layer, hidden_block,
                          kaedgecnn_layer, kagcn_layer, kagin_layer, load_checkpoint,
                          save_checkpoint)


class Identity:
    n_in = None

    def __call__(self, x):
        return x


def lonely(rng, d=3):
    return Graph(x=rng.normal(size=(1, d)))


# --- GCN -------------------------------------------------------------------

def test_gcn_isolated_node_identity(rng):
    g = lonely(rng)
    H = Tensor(g.x)
    assert np.array_equal(gcn_layer(g, H, Tensor(np.eye(3))).data, g.x)


def test_gcn_zero_input(rng):
    g = random_graph(rng, 7)
    assert not gcn_layer(g, Tensor(np.zeros((7, 3))), Tensor(rng.normal(size=(3, 2)))).data.any()


@pytest.mark.parametrize("seed", range(5))
def test_gcn_node_form_matches_matrix_form(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(1, 31)), dim=5)
    W = rng.normal(size=(5, 4))
    out = gcn_layer(g, Tensor(g.x), Tensor(W)).data
    assert np.abs(out - dense_gcn(g, g.x, W)).max() <= 1e-10
    assert np.abs(out - gcn_loop(g, g.x, W)).max() <= 1e-10


def test_gcn_dimension_error(rng):
    g = random_graph(rng, 4)
    with pytest.raises(DimensionError):
        gcn_layer(g, Tensor(g.x), Tensor(np.zeros((2, 2))))


# --- GIN -------------------------------------------------------------------

def test_gin_examples(rng):
    g = lonely(rng)
    assert np.array_equal(gin_layer(g, Tensor(g.x), Identity()).data, g.x)
    path = Graph(x=np.ones((3, 2)), edges=[(0, 1), (1, 0), (1, 2), (2, 1)])
    assert np.array_equal(gin_layer(path, Tensor(path.x), Identity()).data[1], [3.0, 3.0])


def test_gin_matches_scalar_expansion(rng):
    g = random_graph(rng, 9)
    mlp = MLP.init(3, 4, 2, rng)
    eps = rng.normal()
    out = gin_layer(g, Tensor(g.x), mlp, eps).data
    assert np.abs(out - gin_loop(g, g.x, mlp, eps)).max() <= 1e-12


def test_gin_dimension_error(rng):
    g = random_graph(rng, 4)
    with pytest.raises(DimensionError):
        gin_layer(g, Tensor(g.x), MLP.init(5, 4, 2, rng))


# --- EdgeCNN ---------------------------------------------------------------

def test_edgecnn_examples(rng):
    mlp = MLP.init(6, 4, 2, rng)
    g = Graph(x=rng.normal(size=(3, 3)), edges=[(0, 1), (1, 0)])
    assert not edgecnn_layer(g, Tensor(g.x), mlp).data[2].any()
    same = Graph(x=np.tile(rng.normal(size=(1, 3)), (4, 1)),
                 edges=[(0, 1), (1, 0), (0, 2), (2, 0), (0, 3), (3, 0)])
    expected = 3 * mlp(Tensor(np.concatenate([same.x[0], np.zeros(3)])[None])).data[0]
    assert np.allclose(edgecnn_layer(same, Tensor(same.x), mlp).data[0], expected, rtol=1e-14)


def test_edgecnn_matches_edge_loop(rng):
    g = random_graph(rng, 4, p=0.7)
    mlp = MLP.init(6, 5, 2, rng)
    assert np.abs(edgecnn_layer(g, Tensor(g.x), mlp).data - edge_loop(g, g.x, mlp, 2)).max() <= 1e-12


def test_edgecnn_dimension_error(rng):
    g = random_graph(rng, 4)
    with pytest.raises(DimensionError):
        edgecnn_layer(g, Tensor(g.x), MLP.init(3, 4, 2, rng))


# --- KAN layers ------------------------------------------------------------

def test_kagcn_examples(rng):
    g = random_graph(rng, 6)
    zero = KanLayerParams.zeros(3, 2, 4, 3)
    assert not kagcn_layer(g, Tensor(g.x), zero).data.any()
    one = lonely(rng)
    phi = random_kan(3, 2, rng)
    assert np.array_equal(kagcn_layer(one, Tensor(one.x), phi).data,
                          kan_layer_forward(Tensor(one.x), phi).data)


@pytest.mark.parametrize("seed", range(5))
def test_kagcn_node_form_matches_matrix_form(seed):
    rng = np.random.default_rng(100 + seed)
    g = random_graph(rng, int(rng.integers(1, 31)), dim=4)
    phi = random_kan(4, 3, rng)
    assert np.abs(kagcn_layer(g, Tensor(g.x), phi).data - dense_kagcn(g, g.x, phi)).max() <= 1e-10


def test_kagin_examples(rng):
    g = lonely(rng)
    phi = random_kan(3, 2, rng)
    assert np.array_equal(kagin_layer(g, Tensor(g.x), phi).data, kan_layer_forward(Tensor(g.x), phi).data)
    big = random_graph(rng, 8)
    H = Tensor(big.x)
    assert np.array_equal(gin_aggregate(big, H, 0.0).data, gin_aggregate(big, H).data)


def test_gin_and_kagin_share_aggregation(rng, monkeypatch):
    import kagnn.models as m
    g = random_graph(rng, 8)
    seen = []

    def spy(graph, H, epsilon=0.0):
        out = gin_aggregate(graph, H, epsilon)
        seen.append(out.data.copy())
        return out

    monkeypatch.setattr(m, "gin_aggregate", spy)
    m.gin_layer(g, Tensor(g.x), MLP.init(3, 4, 2, rng))
    m.kagin_layer(g, Tensor(g.x), random_kan(3, 2, rng))
    assert np.array_equal(seen[0], seen[1])


def test_kagin_matches_scalar_expansion(rng):
    g = random_graph(rng, 9)
    phi = random_kan(3, 2, rng)
    eps = 0.3
    assert np.abs(kagin_layer(g, Tensor(g.x), phi, eps).data - gin_loop(g, g.x, phi, eps)).max() <= 1e-12


def test_kaedgecnn_examples(rng):
    g = Graph(x=rng.normal(size=(4, 3)))
    assert not kaedgecnn_layer(g, Tensor(g.x), random_kan(6, 2, rng)).data.any()
    h = random_graph(rng, 6)
    assert not kaedgecnn_layer(h, Tensor(h.x), KanLayerParams.zeros(6, 2, 3, 3)).data.any()


def test_kaedgecnn_matches_edge_loop(rng):
    g = random_graph(rng, 5, p=0.6)
    phi = random_kan(6, 2, rng)
    assert np.abs(kaedgecnn_layer(g, Tensor(g.x), phi).data - edge_loop(g, g.x, phi, 2)).max() <= 1e-12


@pytest.mark.parametrize("layer,d_in", [(kagcn_layer, 4), (kagin_layer, 4), (kaedgecnn_layer, 4)])
def test_kan_layer_dimension_errors(layer, d_in, rng):
    g = random_graph(rng, 4)
    with pytest.raises(DimensionError):
        layer(g, Tensor(g.x), random_kan(d_in, 2, rng))


# --- properties ------------------------------------------------------------

@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_permutation_equivariance(kind, rng):
    g = random_graph(rng, 12)
    conv = random_conv(kind, 3, 4, rng)
    out = apply_layer(kind, g, Tensor(g.x), conv).data
    for _ in range(3):
        perm = rng.permutation(12)
        pg = permute_graph(g, perm)
        assert np.abs(apply_layer(kind, pg, Tensor(pg.x), conv).data - out[perm]).max() <= 1e-10


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_gradients(kind, rng):
    g = random_graph(rng, 7)
    conv = random_conv(kind, 3, 2, rng)
    H = Tensor(g.x, requires_grad=True)
    tensors = [H] + conv_tensors(conv)
    err = grad_check(lambda ts: (apply_layer(kind, g, ts[0], conv) ** 2).sum(), tensors)
    assert err <= 1e-4


# --- blocks ----------------------------------------------------------------

def test_kagcn_block_is_silu_of_layer(rng):
    g = random_graph(rng, 6)
    phi = random_kan(3, 4, rng)
    H = Tensor(g.x)
    block = hidden_block("KAGCN", g, H, phi, p=0.0, training=False)
    assert np.array_equal(block.data, silu(kagcn_layer(g, H, phi)).data)


def test_kagin_block_default_stats_identity(rng):
    g = random_graph(rng, 6)
    phi = random_kan(3, 4, rng)
    H = Tensor(g.x)
    block = hidden_block("KAGIN", g, H, phi, BatchNormParams(4), p=0.0, training=False)
    assert np.array_equal(block.data, kagin_layer(g, H, phi).data)


def test_kaedgecnn_block_staging(rng):
    g = random_graph(rng, 6)
    phi = random_kan(6, 4, rng)
    H = Tensor(g.x)
    block = hidden_block("KAEdgeCNN", g, H, phi, BatchNormParams(4), p=0.0, training=False)
    assert np.array_equal(block.data, silu(kaedgecnn_layer(g, H, phi)).data)


def test_block_chain_mismatch(rng):
    g = random_graph(rng, 6)
    first = random_kan(3, 4, rng)
    second = random_kan(5, 4, rng)
    H = hidden_block("KAGCN", g, Tensor(g.x), first)
    with pytest.raises(DimensionError):
        hidden_block("KAGCN", g, H, second)


def test_block_unknown_kind(rng):
    g = random_graph(rng, 3)
    with pytest.raises(ConfigError):
        hidden_block("GAT", g, Tensor(g.x), None)


def test_block_dropout_training(rng):
    g = random_graph(rng, 10)
    phi = random_kan(3, 4, rng)
    H = Tensor(g.x)
    a = hidden_block("KAGCN", g, H, phi, p=0.5, training=True, rng=np.random.default_rng(0))
    b = hidden_block("KAGCN", g, H, phi, p=0.5, training=True, rng=np.random.default_rng(0))
    assert np.array_equal(a.data, b.data)
    assert (a.data == 0).any()


# --- heads -----------------------------------------------------------------

def test_graph_pool_identical_rows(rng):
    row = rng.normal(size=(1, 4))
    g = random_graph(rng, 5)
    H = Tensor(np.tile(row, (5, 1)))

    class Capture:
        def __call__(self, x):
            self.pooled = x.data
            return x

    cap = Capture()
    apply_head("graph_pool", H, g, cap)
    assert np.allclose(cap.pooled, row, rtol=1e-15, atol=1e-15)


def test_edge_dot_examples():
    g = Graph(x=np.zeros((2, 2)), edges=[(0, 1), (1, 0)])
    H = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert not apply_head("edge_dot", H, g, None).data.any()
    H = Tensor(np.array([[1.0, 3.0], [2.0, 2.0]]))
    out = apply_head("edge_dot", H, g, None).data
    assert out[0] == out[1] == 8.0


def test_node_readout_zero_head(rng):
    g = random_graph(rng, 5)
    out = apply_head("node_readout", Tensor(rng.normal(size=(5, 4))), g, KanLayerParams.zeros(4, 3, 4, 3))
    assert not out.data.any()


def test_head_target_mismatch():
    check_head_target("edge_dot", "edge_scalars")
    with pytest.raises(ConfigError):
        check_head_target("graph_pool", "node_labels")


@pytest.mark.parametrize("head", ["node_readout", "graph_pool"])
def test_kan_head_gradients(head, rng):
    g = batch_graphs([random_graph(rng, 4), random_graph(rng, 6)])
    phi = random_kan(3, 2, rng)
    H = Tensor(rng.uniform(-1, 1, size=(10, 3)), requires_grad=True)
    tensors = [H] + conv_tensors(phi)
    assert grad_check(lambda ts: (apply_head(head, ts[0], g, phi) ** 2).sum(), tensors) <= 1e-4


def test_graph_pool_permutation_invariance(rng):
    g = random_graph(rng, 9)
    phi = random_kan(3, 2, rng)
    out = apply_head("graph_pool", Tensor(g.x), g, phi).data
    perm = rng.permutation(9)
    pg = permute_graph(g, perm)
    assert np.abs(apply_head("graph_pool", Tensor(pg.x), pg, phi).data - out).max() <= 1e-10


# --- model assembly --------------------------------------------------------

def config(kind, **kw):
    base = dict(layer_kind=kind, in_dim=3, out_dim=2, head="node_readout", num_layers=2, hidden_dim=8)
    if kind.startswith("KA"):
        base.update(grid_size=4, spline_order=3)
    base.update(kw)
    return ModelConfig(**base)


def test_build_minimal_depth(rng):
    m = build_model(config("KAGCN", num_layers=1), rng)
    assert len(m.convs) == 1 and m.head is not None


def test_build_is_seeded():
    a = build_model(config("KAGIN"), np.random.default_rng(5)).state_dict()
    b = build_model(config("KAGIN"), np.random.default_rng(5)).state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_tuned_size_layer_count(rng):
    cfg = ModelConfig("KAGCN", in_dim=5, out_dim=7, head="graph_pool", num_layers=2,
                      hidden_dim=39, dropout=0.2141, grid_size=4, spline_order=4).validate(True)
    m = build_model(cfg, rng)
    assert m.convs[1].num_parameters() == 15210 == kan_param_count(39, 39, 4, 4)


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("head", ["node_readout", "graph_pool", "edge_dot"])
def test_parameter_count_matches(kind, head, rng):
    cfg = config(kind, head=head, num_layers=3)
    assert build_model(cfg, rng).num_parameters() == analytic_parameter_count(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        config("GCN", grid_size=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig("KAGCN", 3, 2, "node_readout").validate()
    with pytest.raises(ConfigError):
        config("KAGCN", hidden_dim=100).validate(strict_ranges=True)
    config("KAGCN", hidden_dim=100).validate()
    with pytest.raises(ConfigError):
        config("GAT").validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"layer_kind": "GCN", "bogus": 1})


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_batched_equals_per_graph(kind, rng):
    cfg = config(kind, head="graph_pool")
    m = build_model(cfg, rng)
    graphs = [random_graph(rng, n) for n in (4, 7, 5)]
    batched = m(batch_graphs(graphs)).data
    single = np.concatenate([m(g).data for g in graphs])
    assert np.abs(batched - single).max() <= 1e-12


def test_checkpoint_round_trip(tmp_path, rng):
    m = build_model(config("KAEdgeCNN"), rng)
    m.norms[0].running_mean = rng.normal(size=8)
    path = tmp_path / "model.npz"
    save_checkpoint(path, m, extras={"scale": np.arange(3.0)}, meta={"seed": 1})
    back, extras, meta = load_checkpoint(path)
    assert back.config == m.config and meta == {"seed": 1}
    assert np.array_equal(extras["scale"], np.arange(3.0))
    s1, s2 = m.state_dict(), back.state_dict()
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)
    g = random_graph(rng, 6)
    assert np.array_equal(m(g).data, back(g).data)


def test_forward_feature_mismatch(rng):
    m = build_model(config("GCN"), rng)
    with pytest.raises(DimensionError):
        m(Graph(x=np.zeros((3, 5))))
