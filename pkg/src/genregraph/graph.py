"""Edge-convolution GNN on a complete graph of clip embeddings.

Each layer sends node j -> i the message ``relu(W (x_i - x_j) + b)``. The
difference is deliberately not symmetrized, so m_ij and m_ji generally
differ. Messages are mean-aggregated over all j != i and the update is
``relu(V [x_i, agg_i] + c)``. Because the message is one dense layer of a
difference, ``W x_i - W x_j`` splits per node, and the mean over the complete
graph is computed exactly with :func:`ops.pairwise_relu_mean` without
building the n*n message tensor.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Adam, Dense, Module, NonFiniteError, Tensor, no_grad, ops

log = logging.getLogger(__name__)

MAX_NODES = 2000


class GraphError(ValueError):
    pass


@dataclass
class EmbeddingGraph:
    """Complete graph; adjacency is implicit.

    ``train_mask`` marks nodes whose labels reach the loss; every other node
    is in ``test_mask`` and takes part in message passing only. ``eval_mask``
    (a subset of ``test_mask``, default all of it) selects the nodes that
    are scored, so unlabeled training-pool nodes can be context without
    counting as test nodes.
    """

    node_features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray
    eval_mask: np.ndarray | None = None
    node_ids: list[str] | None = None

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_mask = np.asarray(self.train_mask, bool)
        self.test_mask = np.asarray(self.test_mask, bool)
        self.eval_mask = self.test_mask.copy() if self.eval_mask is None else np.asarray(self.eval_mask, bool)
        if self.node_ids is None:
            self.node_ids = [str(i) for i in range(self.n)]
        self.validate()

    @property
    def n(self) -> int:
        return self.node_features.shape[0]

    @property
    def dim(self) -> int:
        return self.node_features.shape[1]

    def validate(self) -> None:
        n = self.n
        if self.node_features.ndim != 2 or n < 2:
            raise GraphError(f"need an [n >= 2, d] feature matrix, got {self.node_features.shape}")
        if not np.all(np.isfinite(self.node_features)):
            raise GraphError("node features must be finite")
        for name in ("labels", "train_mask", "test_mask", "eval_mask"):
            if getattr(self, name).shape != (n,):
                raise GraphError(f"{name} must have one entry per node")
        if np.any(self.train_mask & self.test_mask) or not np.all(self.train_mask | self.test_mask):
            raise GraphError("every node must be in exactly one of train_mask / test_mask")
        if np.any(self.eval_mask & ~self.test_mask):
            raise GraphError("eval_mask must be a subset of test_mask")
        if len(self.node_ids) != n:
            raise GraphError("node_ids must have one entry per node")

    def permuted(self, perm) -> "EmbeddingGraph":
        perm = np.asarray(perm)
        return EmbeddingGraph(self.node_features[perm], self.labels[perm], self.train_mask[perm],
                              self.test_mask[perm], self.eval_mask[perm], [self.node_ids[i] for i in perm])


def build_graph(features, labels, split) -> EmbeddingGraph:
    """Graph from a :class:`~genregraph.datagen.Split`: labeled nodes train, the rest transductive."""
    return EmbeddingGraph(features, labels, split.labeled, ~split.labeled, split.test)


class EdgeGcnLayer(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, d_msg: int | None = None):
        d_msg = d_in if d_msg is None else d_msg
        self.gamma = Dense(d_in, d_msg, rng)
        self.phi = Dense(d_in + d_msg, d_out, rng)

    @property
    def d_in(self) -> int:
        return self.gamma.n_in

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.d_in:
            raise GraphError(f"layer expects {self.d_in}-d features, got {x.shape[1]}")
        agg = ops.pairwise_relu_mean(ops.matmul(x, self.gamma.weight), self.gamma.bias)
        return ops.relu(self.phi(ops.concat([x, agg], axis=1)))

    def dense_forward(self, x: Tensor) -> Tensor:
        """Reference path that materializes every message; O(n^2 d) memory."""
        n = x.shape[0]
        ii, jj = np.nonzero(~np.eye(n, dtype=bool))
        diffs = ops.sub(ops.take_rows(x, ii), ops.take_rows(x, jj))
        msgs = ops.relu(self.gamma(diffs))
        agg = ops.mul(ops.reshape(ops.sum(ops.reshape(msgs, (n, n - 1, -1)), axis=1), (n, -1)), 1.0 / (n - 1))
        return ops.relu(self.phi(ops.concat([x, agg], axis=1)))


class GnnModel(Module):
    def __init__(self, n_classes: int, seed: int = 0, in_dim: int = 128, dims=(64, 32)):
        rng = np.random.default_rng(seed)
        chain = (in_dim, *dims)
        self.layers = [EdgeGcnLayer(a, b, rng) for a, b in zip(chain[:-1], chain[1:])]
        # small classifier init keeps the first loss at chance level
        self.classifier = Dense(chain[-1], n_classes, rng, gain=0.1)

    @property
    def in_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def n_classes(self) -> int:
        return self.classifier.n_out

    def logits(self, x: Tensor, dense: bool = False) -> Tensor:
        if x.shape[0] > MAX_NODES:
            raise GraphError(f"graph has {x.shape[0]} nodes; the full-batch limit is {MAX_NODES}")
        for layer in self.layers:
            x = layer.dense_forward(x) if dense else layer(x)
        return self.classifier(x)


def edge_message(x_i, x_j, layer: EdgeGcnLayer) -> np.ndarray:
    """m_ij = relu(gamma(x_i - x_j))."""
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    if x_i.shape != (layer.d_in,) or x_j.shape != (layer.d_in,):
        raise GraphError(f"edge_message expects two {layer.d_in}-vectors")
    with no_grad():
        return ops.relu(layer.gamma(Tensor(x_i - x_j))).data


def node_update(x_i, neighbors, layer: EdgeGcnLayer) -> np.ndarray:
    """phi_g([x_i, mean_j m_ij]) for one node given its neighbors' features."""
    neighbors = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    if neighbors.size == 0 or len(neighbors) < 1:
        raise GraphError("node_update needs at least one neighbor")
    agg = np.mean([edge_message(x_i, x_j, layer) for x_j in neighbors], axis=0)
    with no_grad():
        return ops.relu(layer.phi(Tensor(np.concatenate([np.asarray(x_i, float), agg])))).data


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def gnn_forward(graph: EmbeddingGraph, model: GnnModel) -> tuple[np.ndarray, np.ndarray]:
    if graph.dim != model.in_dim:
        raise GraphError(f"graph features are {graph.dim}-d, model expects {model.in_dim}")
    with no_grad():
        logits = model.logits(Tensor(graph.node_features)).data
    return logits, softmax_np(logits)


@dataclass
class GnnConfig:
    epochs: int = 1000
    lr: float = 3e-4
    seed: int = 0
    dims: tuple = (64, 32)


@dataclass
class TrainResult:
    model: Module
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    seconds: float = 0.0


def _check_trainable(labels: np.ndarray, mask: np.ndarray) -> None:
    if not mask.any():
        raise GraphError("training mask is empty")
    if len(np.unique(labels[mask])) < 2:
        raise GraphError("training mask must contain at least 2 classes")


def fit_full_batch(model: Module, forward, labels: np.ndarray, mask: np.ndarray,
                   epochs: int, lr: float) -> TrainResult:
    """Adam on masked cross-entropy; ``forward()`` rebuilds the logits graph each epoch."""
    opt = Adam(model.parameters(), lr=lr)
    result = TrainResult(model)
    safe_labels = np.where(mask, labels, 0)
    start = time.perf_counter()
    for epoch in range(epochs):
        opt.zero_grad()
        try:
            logits = forward()
            loss = ops.cross_entropy(logits, safe_labels, mask)
            loss.backward()
        except NonFiniteError as err:
            raise GraphError(f"non-finite value at epoch {epoch}: {err}") from err
        opt.step()
        result.loss.append(loss.item())
        result.accuracy.append(float(np.mean(logits.data[mask].argmax(axis=1) == labels[mask])))
    result.seconds = time.perf_counter() - start
    return result


def train_gnn(graph: EmbeddingGraph, config: GnnConfig = GnnConfig(), n_classes: int | None = None
              ) -> TrainResult:
    """Full-batch training; only ``train_mask`` labels are read."""
    _check_trainable(graph.labels, graph.train_mask)
    if n_classes is None:
        n_classes = int(graph.labels[graph.train_mask].max()) + 1
    model = GnnModel(n_classes, config.seed, graph.dim, config.dims)
    x = Tensor(graph.node_features)
    return fit_full_batch(model, lambda: model.logits(x), graph.labels, graph.train_mask,
                          config.epochs, config.lr)


@dataclass
class Score:
    predictions: np.ndarray
    accuracy: float
    confusion: np.ndarray  # [true, predicted]


def score_predictions(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray, n_classes: int) -> Score:
    if not mask.any():
        raise GraphError("evaluation mask is empty")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (labels[mask], pred[mask]), 1)
    return Score(pred, float(np.trace(conf) / conf.sum()), conf)


def predict_and_score(model: GnnModel, graph: EmbeddingGraph, mask=None) -> Score:
    """Argmax predictions (lowest class index wins ties) scored on ``eval_mask``."""
    _, probs = gnn_forward(graph, model)
    pred = probs.argmax(axis=1)
    mask = graph.eval_mask if mask is None else np.asarray(mask, bool)
    return score_predictions(pred, graph.labels, mask, model.n_classes)


def extend_graph(graph: EmbeddingGraph, new_features, ids=None) -> EmbeddingGraph:
    """Append unlabeled nodes (test side, not scored); existing nodes are untouched."""
    new = np.asarray(new_features, dtype=np.float64)
    new = np.zeros((0, graph.dim)) if new.size == 0 else np.atleast_2d(new)
    if new.ndim != 2 or new.shape[1] != graph.dim:
        raise GraphError(f"new features must be {graph.dim}-d")
    m = len(new)
    ids = ids or [f"new{k}" for k in range(m)]
    return EmbeddingGraph(
        np.concatenate([graph.node_features, new]),
        np.concatenate([graph.labels, -np.ones(m, np.int64)]),
        np.concatenate([graph.train_mask, np.zeros(m, bool)]),
        np.concatenate([graph.test_mask, np.ones(m, bool)]),
        np.concatenate([graph.eval_mask, np.zeros(m, bool)]),
        list(graph.node_ids) + list(ids),
    )


def directed_edge_count(graph: EmbeddingGraph) -> int:
    return graph.n * (graph.n - 1)


# ------------------------------------------------------------------ files

def dump_graph_csv(graph: EmbeddingGraph, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", *[f"f{k}" for k in range(graph.dim)], "label", "mask", "eval"])
        for i in range(graph.n):
            w.writerow([graph.node_ids[i], *[repr(float(v)) for v in graph.node_features[i]],
                        int(graph.labels[i]), "train" if graph.train_mask[i] else "test",
                        int(graph.eval_mask[i])])


def load_graph_csv(path) -> EmbeddingGraph:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 4
    feats = np.array([[float(v) for v in r[1:1 + dim]] for r in body])
    labels = np.array([int(r[1 + dim]) for r in body])
    train = np.array([r[2 + dim] == "train" for r in body])
    evals = np.array([r[3 + dim] == "1" for r in body])
    return EmbeddingGraph(feats, labels, train, ~train, evals, [r[0] for r in body])


def write_confusion_csv(conf: np.ndarray, class_names, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, conf):
            w.writerow([name, *map(int, row)])


def write_confusion_pgm(conf: np.ndarray, path, cell: int = 16) -> None:
    from .tensorio import write_pgm
    rows = conf / np.maximum(conf.sum(axis=1, keepdims=True), 1)
    write_pgm(path, np.kron(rows, np.ones((cell, cell))), flip=False)


def with_features(graph: EmbeddingGraph, features) -> EmbeddingGraph:
    return replace(graph, node_features=np.asarray(features, dtype=np.float64))
