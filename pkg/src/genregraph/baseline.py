"""Graph-free comparison model and a linear 2-D embedding projection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Dense, Module, Tensor, no_grad, ops
from .graph import GnnConfig, Score, TrainResult, _check_trainable, fit_full_batch, score_predictions

log = logging.getLogger(__name__)


class BaselineNN(Module):
    """Dense 128 -> 64 -> relu -> n_classes, applied to each node on its own."""

    def __init__(self, n_classes: int, seed: int = 0, in_dim: int = 128, hidden: int = 64):
        rng = np.random.default_rng(seed)
        self.hidden = Dense(in_dim, hidden, rng)
        self.classifier = Dense(hidden, n_classes, rng, gain=0.1)

    @property
    def n_classes(self) -> int:
        return self.classifier.n_out

    def logits(self, x: Tensor) -> Tensor:
        return self.classifier(ops.relu(self.hidden(x)))

    def predict(self, features) -> np.ndarray:
        with no_grad():
            return self.logits(Tensor(np.asarray(features, dtype=np.float64))).data.argmax(axis=1)


def run_baseline_nn(embeddings, labels, train_mask, eval_mask, config: GnnConfig = GnnConfig(),
                    n_classes: int | None = None) -> tuple[Score, TrainResult]:
    """Train on labeled rows only with the GNN's optimizer settings; score on ``eval_mask``."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    train_mask = np.asarray(train_mask, bool)
    _check_trainable(labels, train_mask)
    if n_classes is None:
        n_classes = int(labels[train_mask].max()) + 1
    model = BaselineNN(n_classes, config.seed, x.shape[1])
    xt = Tensor(x)
    result = fit_full_batch(model, lambda: model.logits(xt), labels, train_mask, config.epochs, config.lr)
    score = score_predictions(model.predict(x), labels, np.asarray(eval_mask, bool), n_classes)
    return score, result


@dataclass
class Projection:
    coords: np.ndarray  # [n, 2]
    explained: float  # variance fraction carried by the two components


def project_2d(embeddings) -> Projection:
    """Top-2 principal components of the mean-centered rows."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError(f"need an [n >= 3, d] matrix, got {x.shape}")
    centered = x - x.mean(axis=0)
    total = float(np.sum(centered ** 2))
    if total <= 0:
        log.warning("all embeddings identical; projection is zero")
        return Projection(np.zeros((len(x), 2)), 0.0)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    k = min(2, len(s))
    coords = np.zeros((len(x), 2))
    coords[:, :k] = u[:, :k] * s[:k]
    # fix each axis's sign so the largest-magnitude coordinate is positive
    for c in range(k):
        if coords[np.argmax(np.abs(coords[:, c])), c] < 0:
            coords[:, c] *= -1
    return Projection(coords, float(np.sum(s[:k] ** 2) / total))


def write_projection_csv(proj: Projection, labels, class_names, path, ids=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "pc1", "pc2", "label", "class"])
        for i, (xy, y) in enumerate(zip(proj.coords, labels)):
            w.writerow([ids[i] if ids else i, repr(float(xy[0])), repr(float(xy[1])), int(y),
                        class_names[y] if 0 <= y < len(class_names) else ""])
