"""Twin-branch similarity learning over spectrograms.

Both branches of a pair run through one shared :class:`Backbone`; the
similarity head scores the combined pair features.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, Conv2d, Dense, Module, NonFiniteError, Tensor, no_grad, ops

log = logging.getLogger(__name__)

EMBED_DIM = 128
INPUT_SHAPE = (128, 216)
INPUT_CENTER = 0.5


class PairSamplingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Backbone(Module):
    """Four conv(3x3, same) -> relu -> maxpool(2) blocks, then global average pooling.

    The default 128x216 input yields 128 x 8 x 13 maps before pooling.
    """

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64, EMBED_DIM), in_channels: int = 1):
        if widths[-1] != EMBED_DIM:
            raise ValueError(f"last block must have {EMBED_DIM} channels")
        chans = (in_channels, *widths)
        self.convs = [Conv2d(a, b, 3, rng) for a, b in zip(chans[:-1], chans[1:])]

    def feature_maps(self, x) -> list[Tensor]:
        """Post-relu output of every block, channel-major [C, N, h, w].

        ``x`` is a batch of single-channel spectrograms [N, H, W].
        """
        return self.maps_from(self.prepare(x), 0)

    def prepare(self, x) -> Tensor:
        """[N, H, W] spectrograms -> centered CNHW input of the first block."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 3:
            raise ValueError(f"expected [N, H, W] spectrogram batch, got {x.shape}")
        # inputs live in [0, 1]; centering them keeps the first-layer responses
        # from sharing one large common offset across clips
        return ops.sub(ops.reshape(x, (1, *x.shape)), INPUT_CENTER)

    def conv_relu(self, h: Tensor, k: int) -> Tensor:
        """Post-relu output of block k's conv, before its pooling."""
        conv = self.convs[k]
        return ops.relu(ops.conv2d(h, conv.weight, conv.bias, layout="CNHW"))

    def block(self, h: Tensor, k: int) -> Tensor:
        conv = self.convs[k]
        h = ops.conv2d(h, conv.weight, conv.bias, layout="CNHW")
        # pooling first is exact: max commutes with the monotone relu, and the
        # relu then touches a 4x smaller array
        return ops.relu(ops.max_pool2d(h, 2))

    def maps_from(self, h: Tensor, start: int) -> list[Tensor]:
        """Run blocks ``start..`` on a CNHW tensor, returning each block's output."""
        maps = []
        for k in range(start, len(self.convs)):
            h = self.block(h, k)
            maps.append(h)
        return maps

    def embed_from_maps(self, last: Tensor) -> Tensor:
        return ops.transpose(ops.global_avg_pool(last))

    def __call__(self, x) -> Tensor:
        return self.embed_from_maps(self.feature_maps(x)[-1])


def combine_features(f_i, f_j) -> Tensor:
    """[f_i, f_j, (f_i - f_j)^2, f_i * f_j] along the last axis (length 512 for 128-d inputs)."""
    f_i = f_i if isinstance(f_i, Tensor) else Tensor(f_i)
    f_j = f_j if isinstance(f_j, Tensor) else Tensor(f_j)
    if f_i.shape != f_j.shape or f_i.shape[-1] != EMBED_DIM:
        raise ValueError(f"combine_features needs two {EMBED_DIM}-vectors, got {f_i.shape} and {f_j.shape}")
    axis = f_i.ndim - 1
    x1 = ops.concat([f_i, f_j], axis=axis)
    t1 = ops.square(ops.sub(f_i, f_j))
    t2 = ops.mul(f_i, f_j)
    x2 = ops.concat([t1, t2], axis=axis)
    return ops.concat([x1, x2], axis=axis)


class SimilarityHead(Module):
    def __init__(self, rng: np.random.Generator, hidden: int = 128):
        self.hidden = Dense(4 * EMBED_DIM, hidden, rng)
        # small output layer keeps initial scores near 0.5
        self.out = Dense(hidden, 1, rng, gain=0.3)

    def __call__(self, combined: Tensor) -> Tensor:
        z = self.out(ops.relu(self.hidden(combined)))
        return ops.sigmoid(ops.reshape(z, z.shape[:-1]))


class SiameseModel(Module):
    def __init__(self, seed: int = 0, widths=(16, 32, 64, EMBED_DIM)):
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(rng, widths)
        self.head = SimilarityHead(rng)

    def pair_scores(self, embeddings: Tensor, i_idx, j_idx) -> Tensor:
        return self.head(combine_features(ops.take_rows(embeddings, i_idx), ops.take_rows(embeddings, j_idx)))

    def similarity(self, spec_i, spec_j) -> float:
        a, b = _as_input(spec_i), _as_input(spec_j)
        if a.shape != b.shape:
            raise ValueError(f"spectrogram shapes differ: {a.shape} vs {b.shape}")
        with no_grad():
            emb = self.backbone(np.stack([a, b]))
            return float(self.pair_scores(emb, [0], [1]).data[0])

    def scores_from_embeddings(self, emb: np.ndarray, pairs: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.pair_scores(Tensor(emb), pairs[:, 0], pairs[:, 1]).data.copy()


def _as_input(spec) -> np.ndarray:
    values = getattr(spec, "values", spec)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"spectrogram must be 2-D, got {arr.shape}")
    return arr


# ------------------------------------------------------------------ pairs

@dataclass
class PairSet:
    pairs: np.ndarray  # [m, 3] rows of (i, j, same)
    n_pos: int
    n_neg: int
    candidates_pos: int
    candidates_neg: int

    @property
    def candidates_total(self) -> int:
        return self.candidates_pos + self.candidates_neg

    def __len__(self) -> int:
        return len(self.pairs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "label"])
            for i, j, same in self.pairs:
                w.writerow([int(i), int(j), "same" if same else "different"])


def candidate_pairs(labels, mask) -> tuple[np.ndarray, np.ndarray]:
    """All unordered (i < j) pairs among masked nodes, split into same-class and cross-class."""
    labels = np.asarray(labels)
    idx = np.flatnonzero(np.asarray(mask, bool))
    a, b = np.triu_indices(len(idx), k=1)
    i, j = idx[a], idx[b]
    same = labels[i] == labels[j]
    both = np.stack([i, j], axis=1)
    return both[same], both[~same]


def sample_pairs(labels, train_mask, target_ratio: float = 1.0, seed: int = 0,
                 max_pairs: int | None = None) -> PairSet:
    """Balanced same/different pairs drawn uniformly without replacement from masked nodes.

    The larger side is down-sampled so n_pos / n_neg ~= target_ratio. With
    ``max_pairs`` both sides are further down-sampled, keeping the ratio.
    """
    labels = np.asarray(labels)
    mask = np.asarray(train_mask, bool)
    present, counts = np.unique(labels[mask], return_counts=True)
    if len(present) < 2:
        raise PairSamplingError("need at least 2 classes among training nodes")
    for cls in present[counts < 2]:
        log.warning("class %s has fewer than 2 training samples; it contributes no positives", cls)
    pos, neg = candidate_pairs(labels, mask)
    if len(pos) == 0 or len(neg) == 0:
        raise PairSamplingError(f"cannot balance: {len(pos)} positive and {len(neg)} negative candidates")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    n_pos, n_neg = len(pos), len(neg)
    if n_pos > target_ratio * n_neg:
        n_pos = max(1, int(round(target_ratio * n_neg)))
    else:
        n_neg = max(1, int(round(n_pos / target_ratio)))
    if max_pairs is not None and n_pos + n_neg > max_pairs:
        scale = max_pairs / (n_pos + n_neg)
        n_pos, n_neg = max(1, int(round(n_pos * scale))), max(1, int(round(n_neg * scale)))
    take_p = pos[rng.choice(len(pos), n_pos, replace=False)]
    take_n = neg[rng.choice(len(neg), n_neg, replace=False)]
    pairs = np.concatenate([np.column_stack([take_p, np.ones(n_pos, int)]),
                            np.column_stack([take_n, np.zeros(n_neg, int)])])
    pairs = pairs[rng.permutation(len(pairs))]
    return PairSet(pairs, n_pos, n_neg, len(pos), len(neg))


# --------------------------------------------------------------- training

@dataclass
class SiameseConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 3e-4
    seed: int = 0
    # pairs drawn per epoch after balancing; None keeps every balanced pair
    pairs_per_epoch: int | None = None
    widths: tuple = (16, 32, 64, EMBED_DIM)


@dataclass
class SiameseResult:
    model: SiameseModel
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    seconds: float = 0.0


def pair_loss(model: SiameseModel, specs: np.ndarray, pairs: np.ndarray) -> tuple[Tensor, Tensor]:
    """BCE of similarity scores against same-class targets; each distinct clip is embedded once."""
    nodes, inverse = np.unique(pairs[:, :2], return_inverse=True)
    inverse = inverse.reshape(-1, 2)
    emb = model.backbone(specs[nodes])
    scores = model.pair_scores(emb, inverse[:, 0], inverse[:, 1])
    return ops.binary_cross_entropy(scores, pairs[:, 2].astype(np.float64)), scores


def train_siamese(specs: np.ndarray, labels, train_mask, config: SiameseConfig = SiameseConfig()
                  ) -> SiameseResult:
    specs = np.asarray(specs, dtype=np.float64)
    model = SiameseModel(config.seed, config.widths)
    opt = Adam(model.parameters(), lr=config.lr)
    result = SiameseResult(model)
    start = time.perf_counter()
    for epoch in range(config.epochs):
        pairset = sample_pairs(labels, train_mask, seed=config.seed + epoch, max_pairs=config.pairs_per_epoch)
        losses, correct = [], 0
        for s in range(0, len(pairset), config.batch):
            batch = pairset.pairs[s:s + config.batch]
            opt.zero_grad()
            try:
                loss, scores = pair_loss(model, specs, batch)
                loss.backward()
            except NonFiniteError as err:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {s // config.batch}: {err}") from err
            if epoch == 0 and s == 0:
                result.initial_loss = loss.item()
            opt.step()
            losses.append(loss.item() * len(batch))
            correct += int(np.sum((scores.data > 0.5) == (batch[:, 2] == 1)))
        result.epoch_loss.append(float(np.sum(losses) / len(pairset)))
        result.epoch_accuracy.append(correct / len(pairset))
        log.info("siamese epoch %d loss %.4f acc %.3f", epoch, result.epoch_loss[-1], result.epoch_accuracy[-1])
    result.seconds = time.perf_counter() - start
    return result


def embed_all(model: SiameseModel, specs: np.ndarray, batch: int = 32, keep_maps: bool = False):
    """Embedding matrix [n, 128]; with ``keep_maps`` also the last-block maps [n, 128, h, w]."""
    specs = np.asarray(specs, dtype=np.float64)
    rows, maps = [], []
    with no_grad():
        for s in range(0, len(specs), batch):
            last = model.backbone.feature_maps(specs[s:s + batch])[-1]
            rows.append(model.backbone.embed_from_maps(last).data)
            if keep_maps:
                maps.append(last.data.transpose(1, 0, 2, 3))
    emb = np.concatenate(rows) if rows else np.zeros((0, EMBED_DIM))
    return (emb, np.concatenate(maps)) if keep_maps else emb


def evaluate_pairs(model: SiameseModel, embeddings: np.ndarray, labels, mask, seed: int = 0) -> dict:
    """Balanced pair accuracy at threshold 0.5 plus mean scores for same/different pairs."""
    pairset = sample_pairs(labels, mask, seed=seed)
    scores = model.scores_from_embeddings(embeddings, pairset.pairs)
    same = pairset.pairs[:, 2] == 1
    return {
        "pair_accuracy": float(np.mean((scores > 0.5) == same)),
        "mean_same": float(scores[same].mean()),
        "mean_different": float(scores[~same].mean()),
        "n_pairs": int(len(scores)),
    }


def save_model(model: Module, stem) -> None:
    from .tensorio import save_checkpoint
    save_checkpoint(Path(stem), model.state())


def load_model(model: Module, stem) -> Module:
    from .tensorio import load_checkpoint
    model.load_state(load_checkpoint(Path(stem)))
    return model
