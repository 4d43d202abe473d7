"""Procedural genre-like audio, stratified splits, and a GTZAN directory loader."""

from __future__ import annotations

import csv
import json
import logging
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import AudioClip, AudioError, load_wav, segment_clip

log = logging.getLogger(__name__)

KINDS = ("harmonic_stack", "band_noise", "pulse_train", "chirp")
PEAK = 0.9


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GenreSpec:
    """Recipe for one synthetic class.

    ``band`` means: fundamental range for harmonic_stack, passband for
    band_noise, click passband for pulse_train, start-frequency range for
    chirp. Each clip draws its exact frequencies from inside these ranges.
    """

    name: str
    kind: str
    band: tuple[float, float]
    chirp_end: tuple[float, float] = (0.0, 0.0)
    pulse_rate: tuple[float, float] = (4.0, 4.0)
    harmonics: int = 6
    amplitude: tuple[float, float] = (0.5, 1.0)
    noise_floor: tuple[float, float] = (0.001, 0.005)
    band_jitter: float = 0.1

    def validate(self, sample_rate: int) -> None:
        nyq = sample_rate / 2
        if self.kind not in KINDS:
            raise DatasetError(f"{self.name}: unknown generator kind {self.kind!r}")
        ranges = {"band": self.band, "amplitude": self.amplitude, "noise_floor": self.noise_floor,
                  "pulse_rate": self.pulse_rate}
        if self.kind == "chirp":
            ranges["chirp_end"] = self.chirp_end
        for key, (lo, hi) in ranges.items():
            if lo > hi:
                raise DatasetError(f"{self.name}: {key} range {lo}..{hi} is inverted")
        freqs = [*self.band] + ([*self.chirp_end] if self.kind == "chirp" else [])
        if any(not 0 < f < nyq for f in freqs):
            raise DatasetError(f"{self.name}: frequencies must lie in (0, {nyq})")
        if self.kind == "pulse_train" and self.pulse_rate[0] <= 0:
            raise DatasetError(f"{self.name}: pulse rate must be positive")
        if not 0 <= self.band_jitter < 0.5:
            raise DatasetError(f"{self.name}: band_jitter must be in [0, 0.5)")


def default_suite() -> list[GenreSpec]:
    return [
        GenreSpec("harmonic", "harmonic_stack", (110.0, 440.0)),
        GenreSpec("highnoise", "band_noise", (4000.0, 8000.0)),
        GenreSpec("pulses", "pulse_train", (200.0, 10000.0), pulse_rate=(3.6, 4.4)),
        GenreSpec("chirp", "chirp", (500.0, 600.0), chirp_end=(4500.0, 5000.0)),
    ]


def confusable_suite() -> list[GenreSpec]:
    """Overlapping bands and heavy noise floors, so accuracy depends on how many labels exist."""
    floor = (0.02, 0.12)
    return [
        GenreSpec("low_harmonic", "harmonic_stack", (150.0, 330.0), noise_floor=floor),
        GenreSpec("high_harmonic", "harmonic_stack", (260.0, 520.0), noise_floor=floor),
        GenreSpec("noise_a", "band_noise", (2000.0, 5000.0), noise_floor=floor, band_jitter=0.3),
        GenreSpec("noise_b", "band_noise", (3000.0, 6500.0), noise_floor=floor, band_jitter=0.3),
    ]


def _bandlimit(x: np.ndarray, sr: int, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    return np.fft.irfft(spec, n=len(x))


def _jittered_band(spec: GenreSpec, rng: np.random.Generator) -> tuple[float, float]:
    lo, hi = spec.band
    width = hi - lo
    return lo + rng.uniform(0, spec.band_jitter) * width, hi - rng.uniform(0, spec.band_jitter) * width


def synth_clip(spec: GenreSpec, duration_s: float, seed, sample_rate: int = 22050) -> AudioClip:
    """Deterministic per (spec, seed); ``seed`` may be an int or a sequence of ints."""
    if duration_s < 1.0:
        raise DatasetError("duration must be at least 1 s")
    spec.validate(sample_rate)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    nyq = sample_rate / 2

    if spec.kind == "harmonic_stack":
        f0 = rng.uniform(*spec.band)
        x = np.zeros(n)
        for h in range(1, spec.harmonics + 1):
            if h * f0 >= nyq:
                break
            amp = rng.uniform(0.8, 1.2) / h
            x += amp * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    elif spec.kind == "band_noise":
        lo, hi = _jittered_band(spec, rng)
        x = _bandlimit(rng.standard_normal(n), sample_rate, lo, hi)
    elif spec.kind == "pulse_train":
        rate = rng.uniform(*spec.pulse_rate)
        x = np.zeros(n)
        click_len = int(0.01 * sample_rate)
        envelope = np.exp(-np.arange(click_len) / (0.002 * sample_rate))
        start = rng.uniform(0, 1.0 / rate)
        for onset in np.arange(start, duration_s, 1.0 / rate):
            i = int((onset + rng.normal(0, 0.004)) * sample_rate)
            i = min(max(i, 0), n - 1)
            seg = min(click_len, n - i)
            x[i:i + seg] += rng.standard_normal(seg) * envelope[:seg]
        x = _bandlimit(x, sample_rate, *spec.band)
    else:
        f_start = rng.uniform(*spec.band)
        f_end = rng.uniform(*spec.chirp_end)
        phase = 2 * np.pi * (f_start * t + (f_end - f_start) * t * t / (2 * duration_s))
        x = np.sin(phase + rng.uniform(0, 2 * np.pi))

    x = x / (np.max(np.abs(x)) or 1.0)
    x = x * rng.uniform(*spec.amplitude) + rng.standard_normal(n) * rng.uniform(*spec.noise_floor)
    x = PEAK * x / (np.max(np.abs(x)) or 1.0)
    return AudioClip(x, sample_rate)


@dataclass
class Item:
    """One dataset node: a synthetic clip, or a segment of a WAV file read on demand."""

    clip_id: str
    label: int
    source: str
    clip: AudioClip | None = None
    path: str | None = None
    segment: int = 0
    segment_s: float = 5.0
    params: dict = field(default_factory=dict)

    def load(self) -> AudioClip:
        if self.clip is not None:
            return self.clip
        full = load_wav(self.path)
        size = int(round(self.segment_s * full.sample_rate))
        start = self.segment * size
        return AudioClip(full.samples[start:start + size].copy(), full.sample_rate)


@dataclass
class LabeledDataset:
    items: list[Item]
    class_names: list[str]
    skipped: int = 0

    def __post_init__(self):
        labels = self.labels
        if len(labels) and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DatasetError("class indices must be dense in [0, n_classes)")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    @property
    def sources(self) -> list[str]:
        return [it.source for it in self.items]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def generate_dataset(specs: list[GenreSpec], clips_per_class: int, duration_s: float, seed: int,
                     sample_rate: int = 22050) -> LabeledDataset:
    if len(specs) < 2:
        raise DatasetError("need at least 2 genre specs")
    if clips_per_class < 2:
        raise DatasetError("need at least 2 clips per class")
    items = []
    for c, spec in enumerate(specs):
        spec.validate(sample_rate)
        for k in range(clips_per_class):
            clip_seed = (seed, c, k)
            clip_id = f"{spec.name}_{k:04d}"
            items.append(Item(clip_id, c, clip_id, synth_clip(spec, duration_s, clip_seed, sample_rate),
                              params={"kind": spec.kind, "seed": list(clip_seed),
                                      "duration_s": duration_s}))
    return LabeledDataset(items, [s.name for s in specs])


@dataclass
class Split:
    """Node roles: ``labeled`` (loss-visible), ``unlabeled`` (train pool, context only), ``test``."""

    labeled: np.ndarray
    unlabeled: np.ndarray
    test: np.ndarray

    @property
    def transductive(self) -> np.ndarray:
        return ~self.labeled


def _allocate(counts: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Per-class quotas summing to round(frac * total), differing from frac * count by < 1."""
    exact = frac * counts
    quota = np.floor(exact).astype(int)
    extra = int(round(frac * counts.sum())) - quota.sum()
    order = rng.permutation(len(counts))
    order = order[np.argsort(-(exact - quota)[order], kind="stable")]
    quota[order[:max(extra, 0)]] += 1
    return np.minimum(quota, counts)


def split_dataset(dataset: LabeledDataset, test_fraction: float = 0.3, labeled_fraction: float = 1.0,
                  seed: int = 0) -> Split:
    """Stratified split at the source level, so all segments of a source share a side."""
    for name, frac in (("test_fraction", test_fraction), ("labeled_fraction", labeled_fraction)):
        if not 0 < frac <= 1:
            raise DatasetError(f"{name} must be in (0, 1], got {frac}")
    labels = dataset.labels
    sources = np.array(dataset.sources)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    per_class = []
    for c in range(dataset.n_classes):
        srcs = np.unique(sources[labels == c])
        if len(srcs) < 2:
            raise DatasetError(f"class {dataset.class_names[c]!r} has {len(srcs)} source(s); need >= 2")
        per_class.append(rng.permutation(srcs))
    counts = np.array([len(s) for s in per_class])
    n_test = _allocate(counts, test_fraction, rng)
    pools = [s[n_test[c]:] for c, s in enumerate(per_class)]
    n_lab = _allocate(np.array([len(p) for p in pools]), labeled_fraction, rng)

    test_src = {s for c, srcs in enumerate(per_class) for s in srcs[:n_test[c]]}
    lab_src = {s for c, p in enumerate(pools) for s in p[:n_lab[c]]}
    test = np.array([s in test_src for s in sources])
    labeled = np.array([s in lab_src for s in sources])
    return Split(labeled=labeled, unlabeled=~(test | labeled), test=test)


def load_gtzan_layout(root_dir, segment_s: float = 5.0, max_files_per_class: int | None = None
                      ) -> LabeledDataset:
    """One sub-directory per genre holding WAV files; each file becomes ``segment_s`` segments.

    Unreadable files are skipped with a warning and counted in ``skipped``.
    """
    root = Path(root_dir)
    genres = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not genres:
        raise DatasetError(f"{root}: no genre directories")
    items, skipped = [], 0
    for c, genre in enumerate(genres):
        files = sorted((root / genre).glob("*.wav"))
        if max_files_per_class is not None:
            files = files[:max_files_per_class]
        for path in files:
            try:
                count = len(segment_clip(load_wav(path), segment_s))
            except (AudioError, wave.Error, EOFError) as err:
                log.warning("skipping %s: %s", path, err)
                skipped += 1
                continue
            for k in range(count):
                items.append(Item(f"{genre}/{path.stem}#{k}", c, str(path), path=str(path),
                                  segment=k, segment_s=segment_s))
    if not items:
        raise DatasetError(f"{root}: no readable audio")
    return LabeledDataset(items, genres, skipped)


def with_clips_loaded(dataset: LabeledDataset) -> LabeledDataset:
    return replace(dataset, items=[replace(it, clip=it.load()) for it in dataset.items])


def write_manifest(dataset: LabeledDataset, split: Split, path) -> None:
    """CSV of clip id, path or synth params, class, split side, labeled flag."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "source", "class", "split", "labeled"])
        for k, it in enumerate(dataset.items):
            origin = it.path if it.path else json.dumps(it.params, sort_keys=True)
            side = "test" if split.test[k] else "train"
            w.writerow([it.clip_id, origin, dataset.class_names[it.label], side, int(split.labeled[k])])
