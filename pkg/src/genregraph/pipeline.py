"""Staged experiment driver: prepare -> train-siamese -> embed -> train-gnn -> evaluate -> explain.

Each stage reads the previous stage's artifacts from the output directory
and writes its own, so stages can be rerun in isolation. Every random draw
is derived from the single config seed.
"""

from __future__ import annotations

import configparser
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import datagen, gradcam
from .audio import SpectrogramConfig, fixed_size_crop, mel_filterbank, mel_spectrogram, write_wav
from .baseline import BaselineNN, project_2d, run_baseline_nn, write_projection_csv
from .datagen import GenreSpec
from .graph import (MAX_NODES, EmbeddingGraph, GnnConfig, GnnModel, GraphError, dump_graph_csv,
                    predict_and_score, score_predictions, train_gnn, write_confusion_csv, write_confusion_pgm)
from .siamese import SiameseConfig, SiameseModel, embed_all, evaluate_pairs, load_model, sample_pairs, \
    save_model, train_siamese
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

STAGES = ("prepare", "train-siamese", "embed", "train-gnn", "evaluate", "explain")


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


class LockError(RuntimeError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class ExperimentConfig:
    seed: int
    out_dir: Path
    source: str = "synthetic"  # synthetic | gtzan
    suite: str = "default"  # default | confusable | path to a genre INI file
    gtzan_dir: Path | None = None
    clips_per_class: int = 50
    duration_s: float = 5.0
    segment_s: float = 5.0
    max_files_per_class: int | None = None
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    frames: int = 216
    siamese: SiameseConfig = field(default_factory=SiameseConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    test_fraction: float = 0.3
    labeled_fractions: tuple[float, ...] = (0.3, 0.5, 1.0)
    explain_per_class: int = 2
    explain_threshold: float = 0.5
    explain_layer: int = -1
    explain_tap: str = "conv"

    def validate(self) -> None:
        if self.source not in ("synthetic", "gtzan"):
            raise ConfigError(f"[data] source must be synthetic or gtzan, got {self.source!r}")
        if self.source == "gtzan" and (self.gtzan_dir is None or not Path(self.gtzan_dir).is_dir()):
            raise ConfigError(f"[data] gtzan_dir {self.gtzan_dir} is not a directory")
        if self.source == "synthetic" and self.suite not in ("default", "confusable") \
                and not Path(self.suite).is_file():
            raise ConfigError(f"[data] suite {self.suite!r} is neither a built-in suite nor a file")
        if not self.labeled_fractions or any(not 0 < f <= 1 for f in self.labeled_fractions):
            raise ConfigError("labeled fractions must lie in (0, 1]")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("[split] test_fraction must lie in (0, 1)")
        if not 0 <= self.explain_threshold <= 1:
            raise ConfigError("[explain] threshold must lie in [0, 1]")
        if self.explain_tap not in ("conv", "block"):
            raise ConfigError(f"[explain] tap must be conv or block, got {self.explain_tap!r}")


DEFAULT_INI = """\
# Flags override keys here; keys here override built-in defaults.
[run]
seed = 42
out = runs/default

[data]
source = synthetic
suite = default
clips_per_class = 50
duration_s = 5.0

[spectrogram]
frames = 216

[siamese]
epochs = 20
batch = 64
lr = 3e-4
pairs_per_epoch = 384

[gnn]
epochs = 1000
lr = 3e-4
dims = 64, 32

[split]
test_fraction = 0.3
labeled_fractions = 0.3, 0.5, 1.0

[explain]
per_class = 2
threshold = 0.5
tap = conv
"""


def _key_line(text: str, section: str, key: str) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return n
    return None


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def load_config(path=None, seed: int | None = None, out: str | None = None,
                labeled_fractions=None) -> ExperimentConfig:
    """Built-in defaults < INI file < explicit arguments (the CLI flags)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    text = ""
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        text = path.read_text()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None

    def get(section, key, conv, default):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key).strip()
        if raw == "":
            return default
        try:
            return conv(raw)
        except ValueError as err:
            line = _key_line(text, section, key)
            where = f"{path}:{line}" if line else str(path)
            raise ConfigError(f"{where}: [{section}] {key} = {raw!r}: {err}") from None

    base_spec = SpectrogramConfig()
    spectrogram = SpectrogramConfig(**{k: get("spectrogram", k, type(v), v) for k, v in asdict(base_spec).items()})
    base_siam = SiameseConfig()
    ppe = get("siamese", "pairs_per_epoch", int, 384)
    cfg_seed = seed if seed is not None else get("run", "seed", int, None)
    if cfg_seed is None:
        raise ConfigError("a seed is required: set [run] seed or pass --seed")
    out_dir = out if out is not None else get("run", "out", str, None)
    if out_dir is None:
        raise ConfigError("an output directory is required: set [run] out or pass --out")
    def rel(p: str) -> str:
        # relative paths in a config file are relative to that file
        return str(path.parent / p) if path is not None and not Path(p).is_absolute() else p

    gtzan = get("data", "gtzan_dir", str, None)
    suite = get("data", "suite", str, "default")
    if suite not in ("default", "confusable"):
        suite = rel(suite)
    cfg = ExperimentConfig(
        seed=int(cfg_seed),
        out_dir=Path(out_dir),
        source=get("data", "source", str, "synthetic"),
        suite=suite,
        gtzan_dir=Path(rel(gtzan)) if gtzan else None,
        clips_per_class=get("data", "clips_per_class", int, 50),
        duration_s=get("data", "duration_s", float, 5.0),
        segment_s=get("data", "segment_s", float, 5.0),
        max_files_per_class=get("data", "max_files_per_class", int, None),
        spectrogram=spectrogram,
        frames=get("spectrogram", "frames", int, 216),
        siamese=SiameseConfig(epochs=get("siamese", "epochs", int, base_siam.epochs),
                              batch=get("siamese", "batch", int, base_siam.batch),
                              lr=get("siamese", "lr", float, base_siam.lr),
                              pairs_per_epoch=ppe if ppe > 0 else None,
                              widths=tuple(int(w) for w in get("siamese", "widths", _floats, base_siam.widths))),
        gnn=GnnConfig(epochs=get("gnn", "epochs", int, 1000), lr=get("gnn", "lr", float, 3e-4),
                      dims=tuple(int(d) for d in get("gnn", "dims", _floats, (64, 32)))),
        test_fraction=get("split", "test_fraction", float, 0.3),
        labeled_fractions=tuple(labeled_fractions) if labeled_fractions
        else get("split", "labeled_fractions", _floats, (0.3, 0.5, 1.0)),
        explain_per_class=get("explain", "per_class", int, 2),
        explain_threshold=get("explain", "threshold", float, 0.5),
        explain_layer=get("explain", "layer", int, -1),
        explain_tap=get("explain", "tap", str, "conv"),
    )
    cfg.validate()
    return cfg


def load_suite_file(path) -> list[GenreSpec]:
    """Genre recipes from an INI file with one ``[genre NAME]`` section per class."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(path)
    specs = []
    for section in parser.sections():
        if not section.startswith("genre "):
            continue
        sec = parser[section]
        kw = {"name": section[len("genre "):].strip(), "kind": sec.get("kind", "").strip()}
        try:
            for key in ("band", "chirp_end", "pulse_rate", "amplitude", "noise_floor"):
                if key in sec:
                    lo, hi = _floats(sec[key])
                    kw[key] = (lo, hi)
            for key, conv in (("harmonics", int), ("band_jitter", float)):
                if key in sec:
                    kw[key] = conv(sec[key])
        except ValueError as err:
            raise ConfigError(f"{path}: [{section}]: {err}") from None
        if "band" not in kw:
            raise ConfigError(f"{path}: [{section}] band is required")
        specs.append(GenreSpec(**kw))
    if len(specs) < 2:
        raise ConfigError(f"{path}: need at least two [genre NAME] sections")
    return specs


def suite_for(cfg: ExperimentConfig) -> list[GenreSpec]:
    if cfg.suite == "default":
        return datagen.default_suite()
    if cfg.suite == "confusable":
        return datagen.confusable_suite()
    return load_suite_file(cfg.suite)


# ------------------------------------------------------------------ artifacts

def frac_tag(f: float) -> str:
    return f"{int(round(100 * f)):03d}"


class Artifacts:
    """Paths of every stage output under one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def need(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing artifact {p} (run the '{stage}' stage first)")
        return p

    def need_checkpoint(self, stem: str, stage: str) -> Path:
        self.need(stem + ".bin", stage)
        self.need(stem + ".manifest.json", stage)
        return self.path(stem)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@contextmanager
def run_lock(out_dir: Path):
    """Exclusive ownership of ``out_dir`` for one pipeline process."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out_dir} is in use by another run (remove {lock} if that run died)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ------------------------------------------------------------------ stages

def stage_prepare(cfg: ExperimentConfig, art: Artifacts) -> dict:
    if cfg.source == "gtzan":
        dataset = datagen.load_gtzan_layout(cfg.gtzan_dir, cfg.segment_s, cfg.max_files_per_class)
    else:
        suite = suite_for(cfg)
        if len(suite) * cfg.clips_per_class > MAX_NODES:
            raise GraphError(f"{len(suite)} classes x {cfg.clips_per_class} clips exceeds the full-batch limit "
                             f"of {MAX_NODES} nodes")
        dataset = datagen.generate_dataset(suite, cfg.clips_per_class, cfg.duration_s, cfg.seed,
                                           cfg.spectrogram.sample_rate)
    if len(dataset) > MAX_NODES:
        raise GraphError(f"dataset has {len(dataset)} nodes; the full-batch limit is {MAX_NODES}")
    specs = np.stack([fixed_size_crop(mel_spectrogram(it.load(), cfg.spectrogram), cfg.frames).values
                      for it in dataset.items])
    write_tensor(art.path("specs.grtn"), specs)
    write_tensor(art.path("labels.grtn"), dataset.labels)
    if cfg.source == "synthetic":
        audio = art.path("audio")
        audio.mkdir(exist_ok=True)
        for c in range(dataset.n_classes):
            item = next(it for it in dataset.items if it.label == c)
            write_wav(audio / f"{item.clip_id}.wav", item.clip)
    splits = {}
    for f in cfg.labeled_fractions:
        split = datagen.split_dataset(dataset, cfg.test_fraction, f, cfg.seed)
        datagen.write_manifest(dataset, split, art.path(f"manifest_{frac_tag(f)}.csv"))
        splits[frac_tag(f)] = {"labeled_fraction": f,
                               **{k: np.flatnonzero(getattr(split, k)).tolist()
                                  for k in ("labeled", "unlabeled", "test")}}
    _write_json(art.path("splits.json"), splits)
    _write_json(art.path("dataset.json"), {
        "class_names": dataset.class_names, "clip_ids": [it.clip_id for it in dataset.items],
        "sources": dataset.sources, "skipped": dataset.skipped, "n": len(dataset)})
    return {"n": len(dataset)}


def _masks(art: Artifacts, tag: str, n: int) -> dict[str, np.ndarray]:
    splits = json.loads(art.need("splits.json", "prepare").read_text())
    if tag not in splits:
        raise MissingArtifactError(f"splits.json has no labeled fraction {tag} (rerun 'prepare')")
    out = {}
    for k in ("labeled", "unlabeled", "test"):
        m = np.zeros(n, bool)
        m[splits[tag][k]] = True
        out[k] = m
    return out


def _inputs(art: Artifacts):
    specs = read_tensor(art.need("specs.grtn", "prepare"))
    labels = read_tensor(art.need("labels.grtn", "prepare"))
    meta = json.loads(art.need("dataset.json", "prepare").read_text())
    return specs, labels, meta


def stage_train_siamese(cfg: ExperimentConfig, art: Artifacts) -> dict:
    """One siamese model per labeled fraction, paired only within that fraction's labeled nodes."""
    specs, labels, _ = _inputs(art)
    for f in cfg.labeled_fractions:
        tag = frac_tag(f)
        masks = _masks(art, tag, len(labels))
        siam_cfg = SiameseConfig(**{**asdict(cfg.siamese), "seed": cfg.seed})
        sample_pairs(labels, masks["labeled"], seed=cfg.seed).to_csv(art.path(f"pairs_{tag}.csv"))
        result = train_siamese(specs, labels, masks["labeled"], siam_cfg)
        save_model(result.model, art.path(f"siamese_{tag}"))
        _write_json(art.path(f"siamese_{tag}_trace.json"), {
            "initial_loss": result.initial_loss, "epoch_loss": result.epoch_loss,
            "epoch_accuracy": result.epoch_accuracy})
    return {}


def _siamese(cfg: ExperimentConfig, art: Artifacts, tag: str) -> SiameseModel:
    stem = art.need_checkpoint(f"siamese_{tag}", "train-siamese")
    return load_model(SiameseModel(cfg.seed, cfg.siamese.widths), stem)


def stage_embed(cfg: ExperimentConfig, art: Artifacts) -> dict:
    specs, labels, meta = _inputs(art)
    for f in cfg.labeled_fractions:
        tag = frac_tag(f)
        emb = embed_all(_siamese(cfg, art, tag), specs)
        write_tensor(art.path(f"embeddings_{tag}.grtn"), emb)
        write_projection_csv(project_2d(emb), labels, meta["class_names"], art.path(f"projection_{tag}.csv"),
                             meta["clip_ids"])
    return {}


def _graph(art: Artifacts, tag: str, labels, meta) -> EmbeddingGraph:
    emb = read_tensor(art.need(f"embeddings_{tag}.grtn", "embed"))
    masks = _masks(art, tag, len(labels))
    return EmbeddingGraph(emb, labels, masks["labeled"], ~masks["labeled"], masks["test"], meta["clip_ids"])


def stage_train_gnn(cfg: ExperimentConfig, art: Artifacts) -> dict:
    """GNN and the graph-free baseline, both trained on the same labeled nodes."""
    _, labels, meta = _inputs(art)
    n_classes = len(meta["class_names"])
    for f in cfg.labeled_fractions:
        tag = frac_tag(f)
        graph = _graph(art, tag, labels, meta)
        gnn_cfg = GnnConfig(cfg.gnn.epochs, cfg.gnn.lr, cfg.seed, cfg.gnn.dims)
        gnn = train_gnn(graph, gnn_cfg, n_classes)
        save_model(gnn.model, art.path(f"gnn_{tag}"))
        base_score, base = run_baseline_nn(graph.node_features, labels, graph.train_mask, graph.eval_mask,
                                           gnn_cfg, n_classes)
        save_model(base.model, art.path(f"baseline_{tag}"))
        _write_json(art.path(f"gnn_{tag}_trace.json"), {
            "gnn_loss": gnn.loss, "gnn_train_accuracy": gnn.accuracy,
            "baseline_loss": base.loss, "baseline_train_accuracy": base.accuracy})
    return {}


def _gnn(cfg: ExperimentConfig, art: Artifacts, tag: str, n_classes: int, dim: int) -> GnnModel:
    stem = art.need_checkpoint(f"gnn_{tag}", "train-gnn")
    return load_model(GnnModel(n_classes, cfg.seed, dim, cfg.gnn.dims), stem)


@dataclass
class MetricsReport:
    seed: int
    class_names: list[str]
    n_nodes: int
    splits: list[dict]

    def validate(self) -> None:
        for row in self.splits:
            for model in ("gnn", "baseline"):
                m = row[model]
                conf = np.asarray(m["confusion"])
                if not 0 <= m["accuracy"] <= 1:
                    raise ValueError(f"{model} accuracy outside [0, 1]")
                if conf.sum() != row["n_test"] or np.trace(conf) / conf.sum() != m["accuracy"]:
                    raise ValueError(f"{model} confusion matrix disagrees with reported accuracy")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def to_table(self) -> str:
        heads = ["Model"] + [f"{100 * r['labeled_fraction']:g}% labeled" for r in self.splits]
        rows = [[name] + [f"{r[key]['accuracy']:.4f}" for r in self.splits]
                for name, key in (("GNN", "gnn"), ("2-layerNN", "baseline"))]
        rows.append(["Siamese pairs"] + [f"{r['siamese']['pair_accuracy']:.4f}" for r in self.splits])
        widths = [max(len(str(row[c])) for row in [heads, *rows]) for c in range(len(heads))]
        fmt = lambda row: "  ".join(str(v).ljust(w) if c == 0 else str(v).rjust(w)
                                     for c, (v, w) in enumerate(zip(row, widths)))
        return "\n".join([fmt(heads), "  ".join("-" * w for w in widths), *map(fmt, rows)]) + "\n"


def stage_evaluate(cfg: ExperimentConfig, art: Artifacts) -> MetricsReport:
    _, labels, meta = _inputs(art)
    names = meta["class_names"]
    n_classes = len(names)
    for f in cfg.labeled_fractions:
        art.need_checkpoint(f"gnn_{frac_tag(f)}", "train-gnn")
    rows = []
    for f in cfg.labeled_fractions:
        tag = frac_tag(f)
        graph = _graph(art, tag, labels, meta)
        gnn = _gnn(cfg, art, tag, n_classes, graph.dim)
        score = predict_and_score(gnn, graph)
        base = load_model(BaselineNN(n_classes, cfg.seed, graph.dim),
                          art.need_checkpoint(f"baseline_{tag}", "train-gnn"))
        base_score = score_predictions(base.predict(graph.node_features), labels, graph.eval_mask, n_classes)
        siam = _siamese(cfg, art, tag)
        pair_stats = evaluate_pairs(siam, graph.node_features, labels, graph.eval_mask, seed=cfg.seed)
        siam_trace = json.loads(art.need(f"siamese_{tag}_trace.json", "train-siamese").read_text())
        gnn_trace = json.loads(art.need(f"gnn_{tag}_trace.json", "train-gnn").read_text())
        write_confusion_csv(score.confusion, names, art.path(f"confusion_{tag}.csv"))
        write_confusion_pgm(score.confusion, art.path(f"confusion_{tag}.pgm"))
        dump_graph_csv(graph, art.path(f"graph_{tag}.csv"))
        rows.append({
            "labeled_fraction": f,
            "n_labeled": int(graph.train_mask.sum()),
            "n_unlabeled": int((graph.test_mask & ~graph.eval_mask).sum()),
            "n_test": int(graph.eval_mask.sum()),
            "gnn": {"accuracy": score.accuracy, "confusion": score.confusion.tolist(),
                    "loss_trace": gnn_trace["gnn_loss"], "train_accuracy_trace": gnn_trace["gnn_train_accuracy"]},
            "baseline": {"accuracy": base_score.accuracy, "confusion": base_score.confusion.tolist(),
                         "loss_trace": gnn_trace["baseline_loss"]},
            "siamese": {**pair_stats, "loss_trace": siam_trace["epoch_loss"],
                        "accuracy_trace": siam_trace["epoch_accuracy"]},
        })
    report = MetricsReport(cfg.seed, names, len(labels), rows)
    report.validate()
    art.path("metrics.json").write_text(report.to_json())
    art.path("metrics.txt").write_text(report.to_table())
    return report


def stage_explain(cfg: ExperimentConfig, art: Artifacts) -> dict:
    """Heatmaps for the first ``explain_per_class`` test clips of each class, at the largest fraction."""
    specs, labels, meta = _inputs(art)
    names = meta["class_names"]
    tag = frac_tag(max(cfg.labeled_fractions))
    graph = _graph(art, tag, labels, meta)
    backbone = _siamese(cfg, art, tag).backbone
    gnn = _gnn(cfg, art, tag, len(names), graph.dim)
    pred = predict_and_score(gnn, graph).predictions
    bank = mel_filterbank(cfg.spectrogram)
    out = art.path("explain")
    lines = ["clip_id,true_class,explained_class,layer,peak_hz,files"]
    for c in range(len(names)):
        nodes = np.flatnonzero(graph.eval_mask & (labels == c))[:cfg.explain_per_class]
        for node in nodes:
            heat = gradcam.explain(backbone, gnn, specs, int(node), int(pred[node]), graph.node_features,
                                   cfg.explain_layer, cfg.explain_tap == "conv")
            files = gradcam.write_explanation(out, meta["clip_ids"][node], heat, specs[node],
                                              cfg.explain_threshold)
            peak_row = int(np.argmax(heat.values.sum(axis=1)))
            lines.append(f"{meta['clip_ids'][node]},{names[c]},{names[pred[node]]},{heat.layer_tag},"
                         f"{bank.centers_hz[peak_row]:.1f},{';'.join(p.name for p in files)}")
    out.mkdir(exist_ok=True)
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    return {}


STAGE_FUNCS = {
    "prepare": stage_prepare,
    "train-siamese": stage_train_siamese,
    "embed": stage_embed,
    "train-gnn": stage_train_gnn,
    "evaluate": stage_evaluate,
    "explain": stage_explain,
}


def run_pipeline(cfg: ExperimentConfig, stage: str = "all") -> MetricsReport | None:
    """Run one stage or, for ``all``, every stage in order. Stage wall-clock goes to timings.json."""
    if stage != "all" and stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)} or all")
    art = Artifacts(cfg.out_dir)
    report = None
    with run_lock(cfg.out_dir):
        timings_path = art.path("timings.json")
        timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
        for name in STAGES if stage == "all" else (stage,):
            log.info("stage %s", name)
            start = time.perf_counter()
            result = STAGE_FUNCS[name](cfg, art)
            timings[name] = round(time.perf_counter() - start, 3)
            if isinstance(result, MetricsReport):
                report = result
        _write_json(timings_path, timings)
    return report
