import json
import logging

import numpy as np
import pytest

from genregraph.baseline import BaselineNN, project_2d, run_baseline_nn, write_projection_csv
from genregraph.graph import GnnConfig, GraphError
from genregraph.pipeline import (ConfigError, LockError, MetricsReport, MissingArtifactError, frac_tag, load_config,
                                 load_suite_file, run_lock, run_pipeline, suite_for)

TINY = """\
[run]
seed = 3
[data]
clips_per_class = 6
duration_s = 1.5
[spectrogram]
frames = 64
[siamese]
epochs = 2
batch = 16
pairs_per_epoch = 32
widths = 4, 8, 8, 128
[gnn]
epochs = 50
[split]
labeled_fractions = 0.3, 0.5, 1.0
[explain]
per_class = 1
"""


def _ini(tmp_path, text=TINY, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = load_config(_ini(root), out=root / "run")
    report = run_pipeline(cfg, "all")
    return cfg, report


# ------------------------------------------------------------------ config

def test_defaults_and_file_values(tmp_path):
    cfg = load_config(_ini(tmp_path), out=tmp_path / "o")
    assert cfg.seed == 3 and cfg.clips_per_class == 6 and cfg.duration_s == 1.5
    assert cfg.siamese.widths == (4, 8, 8, 128) and cfg.siamese.lr == 3e-4 and cfg.siamese.pairs_per_epoch == 32
    assert cfg.gnn.epochs == 50 and cfg.gnn.dims == (64, 32)
    assert cfg.labeled_fractions == (0.3, 0.5, 1.0)
    assert cfg.test_fraction == 0.3


def test_flags_override_file(tmp_path):
    cfg = load_config(_ini(tmp_path), seed=9, out=tmp_path / "x", labeled_fractions=[1.0])
    assert cfg.seed == 9 and cfg.out_dir == tmp_path / "x" and cfg.labeled_fractions == (1.0,)


def test_seed_is_mandatory(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        load_config(_ini(tmp_path, "[data]\nclips_per_class = 4\n"), out=tmp_path / "o")
    with pytest.raises(ConfigError, match="seed"):
        load_config(None, out=tmp_path / "o")
    assert load_config(None, seed=1, out=tmp_path / "o").seed == 1


def test_bad_value_cites_line_and_key(tmp_path):
    p = _ini(tmp_path, "[run]\nseed = 1\n\n[gnn]\nepochs = lots\n")
    with pytest.raises(ConfigError) as err:
        load_config(p, out=tmp_path / "o")
    assert f"{p}:5" in str(err.value) and "[gnn] epochs" in str(err.value)


def test_syntax_error_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_ini(tmp_path, "seed = 1\n"), out=tmp_path / "o")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini", seed=1, out=tmp_path / "o")


def test_invalid_values(tmp_path):
    for text in ("[data]\nsource = mp3\n", "[split]\ntest_fraction = 1.5\n", "[split]\nlabeled_fractions = 0\n",
                 "[data]\nsource = gtzan\ngtzan_dir = missing\n", "[data]\nsuite = nosuch.ini\n",
                 "[explain]\nthreshold = 2\n", "[explain]\ntap = pool\n"):
        with pytest.raises(ConfigError):
            load_config(_ini(tmp_path, "[run]\nseed = 1\n" + text), out=tmp_path / "o")


def test_relative_paths_follow_config_file(tmp_path):
    (tmp_path / "cfg").mkdir()
    (tmp_path / "cfg" / "g").mkdir()
    cfg = load_config(_ini(tmp_path / "cfg", "[run]\nseed = 1\n[data]\nsource = gtzan\ngtzan_dir = g\n"),
                      out=tmp_path / "o")
    assert cfg.gtzan_dir == tmp_path / "cfg" / "g"


def test_pairs_per_epoch_zero_means_all(tmp_path):
    cfg = load_config(_ini(tmp_path, "[run]\nseed = 1\n[siamese]\npairs_per_epoch = 0\n"), out=tmp_path / "o")
    assert cfg.siamese.pairs_per_epoch is None


SUITE = """\
[genre low]
kind = harmonic_stack
band = 110, 220
[genre high]
kind = band_noise
band = 4000, 8000
"""


def test_suite_file(tmp_path):
    _ini(tmp_path, SUITE, "suite.ini")
    cfg = load_config(_ini(tmp_path, "[run]\nseed = 1\n[data]\nsuite = suite.ini\n"), out=tmp_path / "o")
    specs = suite_for(cfg)
    assert [s.name for s in specs] == ["low", "high"]
    assert specs[1].kind == "band_noise" and specs[1].band == (4000.0, 8000.0)


def test_suite_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_suite_file(_ini(tmp_path, "[genre only]\nkind = chirp\nband = 500, 5000\n", "s1.ini"))
    with pytest.raises(ConfigError):
        load_suite_file(_ini(tmp_path, SUITE + "[genre bad]\nkind = chirp\nband = x\n", "s2.ini"))


def test_built_in_suites(tmp_path):
    cfg = load_config(None, seed=1, out=tmp_path)
    assert len(suite_for(cfg)) == 4


def test_frac_tag():
    assert [frac_tag(f) for f in (0.3, 0.5, 1.0)] == ["030", "050", "100"]


# ------------------------------------------------------------------ pipeline

def test_all_reports_every_fraction(tiny_run):
    cfg, report = tiny_run
    assert [r["labeled_fraction"] for r in report.splits] == [0.3, 0.5, 1.0]
    assert report.n_nodes == 24 and len(report.class_names) == 4
    for row in report.splits:
        for key in ("gnn", "baseline"):
            conf = np.array(row[key]["confusion"])
            assert conf.sum() == row["n_test"]
            assert np.trace(conf) / conf.sum() == row[key]["accuracy"]
        assert row["n_labeled"] + row["n_unlabeled"] + row["n_test"] == 24
        assert len(row["gnn"]["loss_trace"]) == 50 and len(row["siamese"]["loss_trace"]) == 2
    assert report.splits[-1]["n_unlabeled"] == 0


def test_artifacts_written(tiny_run):
    cfg, _ = tiny_run
    out = cfg.out_dir
    for name in ("specs.grtn", "labels.grtn", "splits.json", "dataset.json", "metrics.json", "metrics.txt",
                 "timings.json", "manifest_030.csv", "pairs_100.csv", "siamese_100.bin", "embeddings_050.grtn",
                 "projection_030.csv", "gnn_100.bin", "baseline_100.bin", "confusion_100.csv",
                 "confusion_100.pgm", "graph_100.csv", "explain/summary.csv"):
        assert (out / name).exists(), name
    assert len(list((out / "audio").glob("*.wav"))) == 4
    assert len(list((out / "explain").glob("*_overlay.ppm"))) == 4
    assert not (out / ".lock").exists()
    assert "GNN" in (out / "metrics.txt").read_text()
    assert set(json.loads((out / "timings.json").read_text())) == {
        "prepare", "train-siamese", "embed", "train-gnn", "evaluate", "explain"}


def test_metrics_json_round_trip(tiny_run):
    cfg, report = tiny_run
    text = (cfg.out_dir / "metrics.json").read_text()
    back = MetricsReport.from_json(text)
    back.validate()
    assert back.to_json() == text
    assert "seconds" not in text


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    cfg, _ = tiny_run
    again = load_config(_ini(tmp_path), out=tmp_path / "again")
    run_pipeline(again, "all")
    for name in ("metrics.json", "specs.grtn", "embeddings_030.grtn", "gnn_100.bin"):
        assert (tmp_path / "again" / name).read_bytes() == (cfg.out_dir / name).read_bytes(), name


def test_stage_rerun_reproduces_artifacts(tiny_run, tmp_path):
    cfg, _ = tiny_run
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(cfg.out_dir, copy)
    (copy / "metrics.json").unlink()
    (copy / "gnn_050.bin").unlink()
    one = load_config(_ini(tmp_path), out=copy)
    run_pipeline(one, "embed")
    run_pipeline(one, "train-gnn")
    run_pipeline(one, "evaluate")
    assert (copy / "metrics.json").read_bytes() == (cfg.out_dir / "metrics.json").read_bytes()
    assert (copy / "embeddings_050.grtn").read_bytes() == (cfg.out_dir / "embeddings_050.grtn").read_bytes()


def test_evaluate_before_train_gnn_names_checkpoint(tmp_path):
    cfg = load_config(_ini(tmp_path), out=tmp_path / "o", labeled_fractions=[1.0])
    run_pipeline(cfg, "prepare")
    with pytest.raises(MissingArtifactError, match="gnn_100"):
        run_pipeline(cfg, "evaluate")
    with pytest.raises(MissingArtifactError, match="siamese_100"):
        run_pipeline(cfg, "embed")


def test_missing_prepare_outputs(tmp_path):
    cfg = load_config(_ini(tmp_path), out=tmp_path / "o")
    with pytest.raises(MissingArtifactError, match="specs.grtn"):
        run_pipeline(cfg, "train-siamese")


def test_unknown_stage(tmp_path):
    with pytest.raises(ConfigError):
        run_pipeline(load_config(_ini(tmp_path), out=tmp_path / "o"), "dance")


def test_lock_is_exclusive(tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(LockError):
            with run_lock(tmp_path):
                pass
    with run_lock(tmp_path):
        pass


def test_node_cap(tmp_path):
    cfg = load_config(_ini(tmp_path, TINY.replace("clips_per_class = 6", "clips_per_class = 501")),
                      out=tmp_path / "o")
    with pytest.raises(GraphError, match="2000"):
        run_pipeline(cfg, "prepare")


def test_report_validation_catches_mismatch(tiny_run):
    _, report = tiny_run
    bad = MetricsReport.from_json(report.to_json())
    bad.splits[0]["gnn"]["accuracy"] = 0.123
    with pytest.raises(ValueError):
        bad.validate()


# ------------------------------------------------------------------ baseline

def test_untrained_baseline_is_near_chance():
    rng = np.random.default_rng(0)
    x = np.abs(rng.standard_normal((400, 128)))
    y = np.arange(400) % 4
    accs = [np.mean(BaselineNN(4, seed).predict(x) == y) for seed in range(5)]
    assert abs(np.mean(accs) - 0.25) <= 0.1


def test_baseline_learns_separable_embeddings():
    rng = np.random.default_rng(1)
    centers = np.abs(rng.standard_normal((4, 128)))
    y = np.repeat(np.arange(4), 20)
    x = centers[y] + 0.1 * rng.standard_normal((80, 128))
    train = np.tile(np.arange(20) < 14, 4)
    score, result = run_baseline_nn(x, y, train, ~train, GnnConfig(epochs=200, lr=3e-3))
    assert score.accuracy >= 0.9 and score.confusion.sum() == 24
    assert abs(result.loss[0] - np.log(4)) <= 0.1 * np.log(4)


def test_baseline_needs_two_classes():
    with pytest.raises(GraphError):
        run_baseline_nn(np.ones((4, 3)), [0, 0, 1, 1], [True, True, False, False], [False] * 2 + [True] * 2)


def test_projection_recovers_centered_2d():
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((30, 2)) * [3.0, 1.0]
    pts -= pts.mean(axis=0)
    proj = project_2d(pts)
    assert proj.explained == pytest.approx(1.0)
    # same geometry up to rotation and sign: pairwise distances match
    d = lambda a: np.linalg.norm(a[:, None] - a[None], axis=-1)
    np.testing.assert_allclose(d(proj.coords), d(pts), atol=1e-10)


def test_projection_properties(caplog):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((10, 6))
    proj = project_2d(np.concatenate([x, x]))
    np.testing.assert_allclose(proj.coords[:10], proj.coords[10:], atol=1e-12)
    assert 0 <= proj.explained <= 1
    with caplog.at_level(logging.WARNING):
        flat = project_2d(np.ones((5, 4)))
    assert not flat.coords.any() and "identical" in caplog.text
    with pytest.raises(ValueError):
        project_2d(np.ones((2, 4)))


def test_projection_csv(tmp_path):
    proj = project_2d(np.random.default_rng(4).standard_normal((5, 3)))
    write_projection_csv(proj, [0, 1, 0, 1, 1], ["a", "b"], tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "node_id,pc1,pc2,label,class" and lines[2].endswith(",1,b")
