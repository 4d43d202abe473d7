import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genregraph.autodiff import Tensor, no_grad, ops
from genregraph.graph import (MAX_NODES, EdgeGcnLayer, EmbeddingGraph, GnnConfig, GnnModel, GraphError,
                              directed_edge_count, dump_graph_csv, edge_message, extend_graph, fit_full_batch,
                              gnn_forward, load_graph_csv, node_update, predict_and_score, score_predictions, train_gnn,
                              write_confusion_csv, write_confusion_pgm)
from gradtrials import gnn_composite, run_trials


def _layer(d=6, seed=0, d_out=5):
    return EdgeGcnLayer(d, d_out, np.random.default_rng(seed))


def _graph(n=10, d=8, seed=0, classes=4, labeled=0.6):
    rng = np.random.default_rng(seed)
    train = rng.uniform(size=n) < labeled
    train[:2] = True
    labels = rng.integers(0, classes, n)
    labels[:2] = [0, 1]
    return EmbeddingGraph(rng.standard_normal((n, d)), labels, train, ~train)


# ------------------------------------------------------------------ messages

def test_zero_difference_message_is_relu_bias():
    layer = _layer()
    x = np.random.default_rng(1).standard_normal(6)
    np.testing.assert_array_equal(edge_message(x, x, layer), np.maximum(layer.gamma.bias.data, 0))


def test_identity_gamma_passes_nonnegative_difference():
    layer = _layer(4)
    layer.gamma.weight.data[:] = np.eye(4)
    layer.gamma.bias.data[:] = 0
    x_j = np.array([0.5, -1.0, 2.0, 0.0])
    d = np.array([0.0, 1.5, 0.25, 3.0])
    np.testing.assert_allclose(edge_message(x_j + d, x_j, layer), d, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_messages_are_asymmetric(seed):
    rng = np.random.default_rng(seed)
    layer = _layer(6, seed % 1000)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    assert np.linalg.norm(edge_message(a, b, layer) - edge_message(b, a, layer)) > 1e-6


def test_message_dimension_mismatch():
    with pytest.raises(GraphError):
        edge_message(np.ones(5), np.ones(5), _layer(6))


def test_homogeneous_neighborhood():
    layer = _layer()
    x = np.random.default_rng(2).standard_normal(6)
    out = node_update(x, np.tile(x, (3, 1)), layer)
    with no_grad():
        expected = ops.relu(layer.phi(Tensor(np.concatenate([x, np.maximum(layer.gamma.bias.data, 0)])))).data
    np.testing.assert_allclose(out, expected, rtol=1e-14)


def test_neighbor_order_and_duplication():
    layer = _layer()
    rng = np.random.default_rng(3)
    x, nb = rng.standard_normal(6), rng.standard_normal((5, 6))
    base = node_update(x, nb, layer)
    np.testing.assert_allclose(node_update(x, nb[rng.permutation(5)], layer), base, rtol=1e-13)
    np.testing.assert_allclose(node_update(x, np.concatenate([nb, nb]), layer), base, rtol=1e-13)


def test_node_without_neighbors():
    with pytest.raises(GraphError):
        node_update(np.ones(6), np.zeros((0, 6)), _layer())


def test_layer_matches_per_node_reference():
    layer = _layer(6, 4, d_out=3)
    x = np.random.default_rng(5).standard_normal((7, 6))
    with no_grad():
        fast = layer(Tensor(x)).data
    ref = np.stack([node_update(x[i], np.delete(x, i, axis=0), layer) for i in range(7)])
    np.testing.assert_allclose(fast, ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.integers(0, 2**31))
def test_fast_path_matches_dense(n, seed):
    model = GnnModel(3, seed % 100, in_dim=6, dims=(5, 4))
    x = Tensor(np.random.default_rng(seed).standard_normal((n, 6)))
    with no_grad():
        np.testing.assert_allclose(model.logits(x).data, model.logits(x, dense=True).data, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2**31))
def test_aggregate_bounded_by_largest_message(n, seed):
    layer = _layer(6, seed % 100)
    x = np.random.default_rng(seed).standard_normal((n, 6))
    with no_grad():
        agg = ops.pairwise_relu_mean(ops.matmul(Tensor(x), layer.gamma.weight), layer.gamma.bias).data
    for i in range(n):
        msgs = np.stack([edge_message(x[i], x[j], layer) for j in range(n) if j != i])
        assert np.abs(agg[i]).max() <= np.abs(msgs).max() + 1e-12


# ------------------------------------------------------------------ forward

def test_probability_rows_sum_to_one():
    g = _graph(12)
    _, probs = gnn_forward(g, GnnModel(4, 0, in_dim=8))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert probs.shape == (12, 4)


def test_permutation_equivariance():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(50):
        n = int(rng.integers(2, 30))
        g = _graph(n, 8, trial)
        model = GnnModel(4, trial, in_dim=8)
        perm = rng.permutation(n)
        a, _ = gnn_forward(g, model)
        b, _ = gnn_forward(g.permuted(perm), model)
        worst = max(worst, np.abs(a[perm] - b).max())
    assert worst <= 1e-9


def test_two_identical_nodes_give_identical_rows():
    f = np.random.default_rng(1).standard_normal(128)
    g = EmbeddingGraph(np.stack([f, f]), [0, 1], [True, False], [False, True])
    logits, _ = gnn_forward(g, GnnModel(4, 2))
    np.testing.assert_array_equal(logits[0], logits[1])


def test_forward_dimension_mismatch():
    with pytest.raises(GraphError):
        gnn_forward(_graph(5, 8), GnnModel(4, 0, in_dim=6))


def test_node_limit():
    x = np.zeros((MAX_NODES + 1, 4))
    model = GnnModel(2, 0, in_dim=4, dims=(3,))
    with pytest.raises(GraphError, match="2000"):
        model.logits(Tensor(x))


def test_graph_validation():
    with pytest.raises(GraphError):
        EmbeddingGraph(np.zeros((1, 4)), [0], [True], [False])
    with pytest.raises(GraphError):
        EmbeddingGraph(np.array([[0.0], [np.inf]]), [0, 1], [True, False], [False, True])
    with pytest.raises(GraphError):
        EmbeddingGraph(np.zeros((2, 4)), [0, 1], [True, True], [True, False])
    with pytest.raises(GraphError):
        EmbeddingGraph(np.zeros((2, 4)), [0, 1], [True, False], [False, False])
    with pytest.raises(GraphError):
        EmbeddingGraph(np.zeros((3, 4)), [0, 1, 0], [True, False, False], [False, True, True],
                       eval_mask=[True, False, False])


# ------------------------------------------------------------------ training

def _clustered(n_per=6, classes=4, d=8, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, d)) * 3
    labels = np.repeat(np.arange(classes), n_per)
    feats = centers[labels] + rng.standard_normal((len(labels), d)) * 0.3
    train = np.tile(np.arange(n_per) < n_per // 2, classes)
    return EmbeddingGraph(feats, labels, train, ~train)


@pytest.mark.parametrize("seed", range(5))
def test_first_epoch_loss_near_ln4(seed):
    # embedding-like features: non-negative, order one
    rng = np.random.default_rng(seed)
    g = EmbeddingGraph(np.abs(rng.standard_normal((40, 128))), np.arange(40) % 4, np.arange(40) < 28,
                       np.arange(40) >= 28)
    res = train_gnn(g, GnnConfig(epochs=1, seed=seed))
    assert abs(res.loss[0] - np.log(4)) <= 0.1 * np.log(4)


def test_training_learns_clusters_and_is_deterministic():
    g = _clustered()
    cfg = GnnConfig(epochs=300, lr=1e-2, seed=1, dims=(8, 8))
    a, b = train_gnn(g, cfg), train_gnn(g, cfg)
    assert a.loss[-1] < a.loss[0]
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert np.array_equal(p.data, q.data)
    assert predict_and_score(a.model, g).accuracy == 1.0


def test_test_labels_never_leak():
    g = _clustered(seed=3)
    cfg = GnnConfig(epochs=40, lr=1e-2, seed=0, dims=(6, 5))
    scrambled = EmbeddingGraph(g.node_features, np.where(g.test_mask, 0, g.labels), g.train_mask, g.test_mask)
    a, b = train_gnn(g, cfg), train_gnn(scrambled, cfg)
    assert a.loss == b.loss
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert np.array_equal(p.data, q.data)


def test_training_errors():
    g = _clustered()
    single = EmbeddingGraph(g.node_features, np.where(g.train_mask, 2, g.labels), g.train_mask, g.test_mask)
    with pytest.raises(GraphError):
        train_gnn(single, GnnConfig(epochs=1))
    model = GnnModel(4, 0, in_dim=8)
    x = Tensor(g.node_features)
    with pytest.raises(GraphError, match="non-finite"), np.errstate(invalid="ignore"):
        fit_full_batch(model, lambda: ops.mul(model.logits(x), np.inf), g.labels, g.train_mask, 2, 1e-3)


def test_four_node_composite_gradient():
    worst, _ = run_trials(gnn_composite, trials=20, seed=3)
    assert worst <= 1e-5


# ------------------------------------------------------------------ scoring

def test_perfect_predictions():
    y = np.array([0, 1, 2, 3, 0, 1])
    s = score_predictions(y, y, np.ones(6, bool), 4)
    assert s.accuracy == 1.0
    assert np.array_equal(s.confusion, np.diag(np.diag(s.confusion)))


def test_constant_predictor_on_balanced_set():
    y = np.repeat(np.arange(4), 5)
    s = score_predictions(np.full(20, 2), y, np.ones(20, bool), 4)
    assert s.accuracy == 0.25
    assert s.confusion[:, 2].tolist() == [5, 5, 5, 5]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.booleans()), min_size=1, max_size=40))
def test_confusion_counts(rows):
    y, p, m = map(np.array, zip(*rows))
    if not m.any():
        with pytest.raises(GraphError):
            score_predictions(p, y, m, 4)
        return
    s = score_predictions(p, y, m, 4)
    assert s.confusion.sum() == m.sum()
    assert s.accuracy == pytest.approx(np.mean(p[m] == y[m]))


def test_argmax_ties_go_to_lowest_class():
    model = GnnModel(3, 0, in_dim=4, dims=(3,))
    model.classifier.weight.data[:] = 0
    model.classifier.bias.data[:] = 0
    g = EmbeddingGraph(np.eye(4), [0, 1, 2, 0], [True, True, False, False], [False, False, True, True])
    assert predict_and_score(model, g).predictions.tolist() == [0, 0, 0, 0]


def test_scoring_uses_eval_mask():
    g = _clustered()
    g.eval_mask[:] = False
    g.eval_mask[np.flatnonzero(g.test_mask)[:3]] = True
    model = GnnModel(4, 0, in_dim=8)
    assert predict_and_score(model, g).confusion.sum() == 3
    assert predict_and_score(model, g, g.test_mask).confusion.sum() == g.test_mask.sum()


# ------------------------------------------------------------------ extension

def test_extend_by_zero_nodes():
    g = _graph(10)
    model = GnnModel(4, 1, in_dim=8)
    same = extend_graph(g, np.zeros((0, 8)))
    assert same.n == 10
    assert np.array_equal(gnn_forward(g, model)[0], gnn_forward(same, model)[0])


def test_duplicate_node_gets_same_prediction():
    g = _graph(10, 8, 4)
    model = GnnModel(4, 2, in_dim=8)
    big = extend_graph(g, g.node_features[3:4])
    logits, _ = gnn_forward(big, model)
    np.testing.assert_allclose(logits[10], logits[3], atol=1e-6)
    assert logits[10].argmax() == logits[3].argmax()
    assert np.array_equal(big.node_features[:10], g.node_features)
    assert big.labels[10] == -1 and big.test_mask[10] and not big.eval_mask[10]


def test_extend_four_by_one_edges():
    g = _graph(4, 8, 1)
    assert directed_edge_count(g) == 12
    assert directed_edge_count(extend_graph(g, np.ones((1, 8)))) == 20


def test_extend_dimension_mismatch():
    with pytest.raises(GraphError):
        extend_graph(_graph(4, 8), np.ones((2, 5)))


# ------------------------------------------------------------------ files

def test_graph_csv_round_trip(tmp_path):
    g = _graph(9, 128, 2)
    g.eval_mask[np.flatnonzero(g.test_mask)[0]] = False
    dump_graph_csv(g, tmp_path / "g.csv")
    back = load_graph_csv(tmp_path / "g.csv")
    assert np.array_equal(back.node_features, g.node_features)
    assert np.array_equal(back.labels, g.labels)
    assert np.array_equal(back.train_mask, g.train_mask)
    assert np.array_equal(back.eval_mask, g.eval_mask)
    header = next(csv.reader(open(tmp_path / "g.csv")))
    assert header[0] == "node_id" and header[-3:] == ["label", "mask", "eval"] and len(header) == 132


def test_confusion_outputs(tmp_path):
    conf = np.array([[3, 1], [0, 4]])
    write_confusion_csv(conf, ["a", "b"], tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[1] == ["a", "3", "1"] and rows[2] == ["b", "0", "4"]
    write_confusion_pgm(conf, tmp_path / "c.pgm", cell=4)
    assert (tmp_path / "c.pgm").read_bytes().startswith(b"P5\n8 8\n")
