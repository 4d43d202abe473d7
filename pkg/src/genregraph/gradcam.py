"""Grad-CAM heatmaps for GNN node predictions, traced back into the backbone.

The explained score is the pre-softmax logit of class c at the clip's node
after a full GNN forward pass. Every other node's embedding is held fixed,
so the gradient reaching the tapped feature maps is that of one clip only.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .audio import MelFilterbank, MelSpectrogram
from .autodiff import Tensor, no_grad, ops
from .graph import GnnModel
from .siamese import Backbone
from .tensorio import heat_colormap, write_pgm, write_ppm


class GradCamError(ValueError):
    pass


@dataclass
class CamGradients:
    grads: np.ndarray  # [C, h', w']
    maps: np.ndarray  # [C, h', w']
    class_index: int
    layer_tag: str
    logit: float


def layer_tag(backbone: Backbone, layer: int, pre_pool: bool = True) -> str:
    return f"{'conv' if pre_pool else 'block'}{range(len(backbone.convs))[layer] + 1}"


def tap_maps(backbone: Backbone, spec, layer: int = -1, pre_pool: bool = True) -> np.ndarray:
    """Maps of block ``layer`` for one spectrogram, CNHW with N = 1.

    With ``pre_pool`` the tap is the relu'd conv output before the block's
    max-pool (twice the resolution); otherwise it is the block output.
    """
    k = range(len(backbone.convs))[layer]
    with no_grad():
        h = backbone.prepare(np.asarray(spec, dtype=np.float64)[None])
        for j in range(k):
            h = backbone.block(h, j)
        return (backbone.conv_relu(h, k) if pre_pool else backbone.block(h, k)).data


def logit_from_tap(tap: Tensor, backbone: Backbone, gnn: GnnModel, embeddings: np.ndarray,
                   node: int, class_index: int, layer: int = -1, pre_pool: bool = True) -> Tensor:
    """Scalar logit of ``class_index`` at ``node`` as a function of that node's tapped maps."""
    k = range(len(backbone.convs))[layer]
    # the tap is non-negative, so relu(pool(tap)) = pool(tap)
    h = ops.max_pool2d(tap, 2) if pre_pool else tap
    maps = backbone.maps_from(h, k + 1)
    last = maps[-1] if maps else h
    row = backbone.embed_from_maps(last)
    n = len(embeddings)
    parts = [Tensor(embeddings[:node]), row, Tensor(embeddings[node + 1:])]
    x = ops.concat([p for p in parts if p.shape[0]], axis=0)
    logits = gnn.logits(x)
    pick = np.zeros((n, gnn.n_classes))
    pick[node, class_index] = 1.0
    return ops.sum(ops.mul(logits, pick))


def class_score_gradients(backbone: Backbone, gnn: GnnModel, specs, node: int, class_index: int,
                          embeddings: np.ndarray | None = None, layer: int = -1, pre_pool: bool = True
                          ) -> CamGradients:
    """dY^c / dA^k for the clip at ``node``; ``specs`` holds every node's spectrogram.

    ``embeddings`` may be passed to skip re-embedding the graph; it must be
    what the backbone produces for ``specs``.
    """
    specs = np.asarray(specs)
    if not 0 <= node < len(specs):
        raise GradCamError(f"clip index {node} outside 0..{len(specs) - 1}")
    if not 0 <= class_index < gnn.n_classes:
        raise GradCamError(f"class index {class_index} outside 0..{gnn.n_classes - 1}")
    if embeddings is None:
        embeddings = embed_all_backbone(backbone, specs)
    tap = Tensor(tap_maps(backbone, specs[node], layer, pre_pool), requires_grad=True)
    y = logit_from_tap(tap, backbone, gnn, embeddings, node, class_index, layer, pre_pool)
    y.backward()
    grads = tap.grad[:, 0]
    if not np.all(np.isfinite(grads)):
        raise GradCamError("non-finite feature-map gradients")
    return CamGradients(grads, tap.data[:, 0], class_index, layer_tag(backbone, layer, pre_pool), y.item())


def embed_all_backbone(backbone: Backbone, specs, batch: int = 32) -> np.ndarray:
    with no_grad():
        return np.concatenate([backbone(specs[s:s + batch]).data for s in range(0, len(specs), batch)])


def cam_weights(grads) -> np.ndarray:
    """w_k = sum_ij alpha_ij relu(g_kij) with uniform alpha = 1 / (h' w')."""
    g = np.asarray(grads, dtype=np.float64)
    return np.maximum(g, 0.0).mean(axis=(1, 2))


@dataclass
class Heatmap:
    values: np.ndarray  # [n_mels, n_frames], >= 0
    coarse: np.ndarray  # [h', w'] before upsampling
    class_index: int = -1
    layer_tag: str = ""

    def normalized(self) -> np.ndarray:
        """Unit-mass copy, or all-zero if there is no mass."""
        total = self.values.sum()
        return self.values / total if total > 0 else np.zeros_like(self.values)

    def max_normalized(self) -> np.ndarray:
        peak = self.values.max()
        return self.values / peak if peak > 0 else np.zeros_like(self.values)

    def band_mass(self, filterbank: MelFilterbank, lo_hz: float, hi_hz: float) -> float:
        """Fraction of heat in the mel rows whose centers lie in [lo_hz, hi_hz]."""
        rows = filterbank.rows_in_band(lo_hz, hi_hz)
        total = self.values.sum()
        return float(self.values[rows].sum() / total) if total > 0 else 0.0


def upsample(coarse: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear (pixel-center aligned), rescaled so mean intensity matches the coarse map."""
    coarse = np.asarray(coarse, dtype=np.float64)
    fine = zoom(coarse, (shape[0] / coarse.shape[0], shape[1] / coarse.shape[1]), order=1,
                mode="nearest", grid_mode=True)
    fine = np.maximum(fine, 0.0)
    if fine.mean() > 0:
        fine *= coarse.mean() / fine.mean()
    return fine


def heatmap(weights, feature_maps, shape: tuple[int, int] | None = None, class_index: int = -1,
            tag: str = "") -> Heatmap:
    """relu(sum_k w_k A^k), upsampled to ``shape`` (default: coarse size)."""
    w = np.asarray(weights, dtype=np.float64)
    a = np.asarray(feature_maps, dtype=np.float64)
    if a.ndim != 3 or w.shape != (a.shape[0],):
        raise GradCamError(f"weights {w.shape} do not match feature maps {a.shape}")
    coarse = np.maximum(np.tensordot(w, a, axes=1), 0.0)
    fine = upsample(coarse, shape) if shape is not None else coarse.copy()
    return Heatmap(fine, coarse, class_index, tag)


def explain(backbone: Backbone, gnn: GnnModel, specs, node: int, class_index: int,
            embeddings: np.ndarray | None = None, layer: int = -1, pre_pool: bool = True) -> Heatmap:
    cg = class_score_gradients(backbone, gnn, specs, node, class_index, embeddings, layer, pre_pool)
    return heatmap(cam_weights(cg.grads), cg.maps, np.asarray(specs[node]).shape, class_index, cg.layer_tag)


def overlay(heat: Heatmap, spec: MelSpectrogram | np.ndarray, threshold: float) -> np.ndarray:
    """Spectrogram with pixels whose max-normalized heat is below ``threshold`` zeroed."""
    values = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec, dtype=np.float64)
    if values.shape != heat.values.shape:
        raise GradCamError(f"heatmap {heat.values.shape} and spectrogram {values.shape} differ")
    if not 0.0 <= threshold <= 1.0:
        raise GradCamError(f"threshold must be in [0, 1], got {threshold}")
    return np.where(heat.max_normalized() >= threshold, values, 0.0)


def write_explanation(out_dir, clip_id: str, heat: Heatmap, spec, threshold: float = 0.5) -> list[Path]:
    """Spectrogram, heatmap and masked overlay (PGM), a colored overlay (PPM), and heat values (CSV)."""
    values = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec, dtype=np.float64)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{re.sub(r'[^A-Za-z0-9_.-]+', '_', clip_id)}_c{heat.class_index}_{heat.layer_tag or 'map'}"
    norm = heat.max_normalized()
    masked = overlay(heat, values, threshold)
    colored = 0.5 * values[..., None] + 0.5 * heat_colormap(norm) * (norm >= threshold)[..., None]
    paths = [out / f"{stem}_spec.pgm", out / f"{stem}_heat.pgm", out / f"{stem}_overlay.pgm",
             out / f"{stem}_overlay.ppm", out / f"{stem}_heat.csv"]
    write_pgm(paths[0], values)
    write_pgm(paths[1], norm)
    write_pgm(paths[2], masked)
    write_ppm(paths[3], colored)
    with open(paths[4], "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in heat.values])
    return paths
