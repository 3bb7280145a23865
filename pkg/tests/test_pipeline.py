import json
import shutil

import numpy as np
import pytest

from lsfnet import features, network, pipeline
from lsfnet import index as simindex
from lsfnet.cli import main
from lsfnet.descriptors import load_manifest
from lsfnet.errors import DataError
from lsfnet.pipeline import PipelineConfig

FAST = ["--set", "hidden=32", "--set", "code=16", "--set", "iterations=3", "--set", "sample_size=2000",
        "--set", "k=5", "--set", "n_grid=10,30", "--set", "k_grid=5,10"]


@pytest.fixture
def workspace(small_dataset, tmp_path):
    root, train, test = small_dataset
    args = ["--train-manifest", str(train), "--test-manifest", str(test), "--out", str(tmp_path / "out"), *FAST]
    return tmp_path / "out", args, train, test


def _run_all(args):
    for cmd in ("train-fusion", "extract", "fit-selector", "build-index", "evaluate"):
        assert main([cmd, "--quiet", *args]) == 0, cmd


# -- config --------------------------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "lsf.conf"
    cfg.write_text("# comment\nq = 25\nn_grid = 10, 20\nearly_stop = true\nseed = 4  # trailing\n")
    values = pipeline.read_config_file(cfg)
    values["seed"] = 9
    config = PipelineConfig.from_mapping(values)
    assert config.q == 25.0 and config.n_grid == (10, 20) and config.early_stop is True and config.seed == 9
    assert config.artifact("model").name == "model.lsfm"


@pytest.mark.parametrize("values", [{"q": "0"}, {"task": "fg"}, {"nope": "1"}, {"seed": "x"}, {"k_grid": ""}])
def test_config_rejects(values):
    with pytest.raises(DataError):
        PipelineConfig.from_mapping(values)


def test_default_sweep_grid():
    config = PipelineConfig()
    assert pipeline.sweep_pairs(config) == [(n, k) for n in (10, 20, 30, 40, 50) for k in (50, 75, 100)]
    assert (config.n_hashes, config.k, config.q) == (30, 64, 50.0)
    assert (config.lr_autoencoder, config.lr_classifier, config.iterations) == (1e-3, 1e-2, 200)


def test_random_pairs_within_ranges():
    pairs = pipeline.sweep_pairs(PipelineConfig(random_pairs=40, seed=3))
    assert len(pairs) == 40
    assert all(10 <= n <= 50 and 50 <= k <= 100 for n, k in pairs)
    assert pairs == pipeline.sweep_pairs(PipelineConfig(random_pairs=40, seed=3))


# -- CLI ------------------------------------------------------------------------------

def test_full_cli_pipeline(workspace, capsys):
    out, args, train, test = workspace
    _run_all(args)
    for name in ("model.lsfm", "model.lsfm.json", "model_loss.csv", "selector.lsfs", "selector.csv",
                 "index.lsfi", "train_features.csv", "test_features.csv", "eval_background.json",
                 "confusion_background.csv"):
        assert (out / name).is_file(), name

    ids, feats = features.read_features_csv(out / "train_features.csv")
    assert ids == [e.video_id for e in load_manifest(train).entries]
    assert feats.shape == (60, 16)
    assert len(features.load_selector(out / "selector.lsfs").selected) == 8

    report = json.loads((out / "eval_background.json").read_text())
    conf = np.array(report["confusion"])
    test_labels = load_manifest(test).labels()
    np.testing.assert_array_equal(conf.sum(axis=1), np.bincount(test_labels, minlength=6))
    assert report["accuracy"] == pytest.approx(np.trace(conf) / conf.sum())
    assert report["mean_accuracy"] == pytest.approx(np.mean([p["accuracy"] for p in report["pairs"]]))
    assert len(report["pairs"]) == 4
    assert report["split"] == {"train": 60, "test": 30}


def test_commands_are_idempotent(workspace, tmp_path):
    out, args, *_ = workspace
    _run_all(args)
    first = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix in (".lsfm", ".lsfs", ".lsfi", ".csv")}
    report = json.loads((out / "eval_background.json").read_text())
    shutil.rmtree(out)
    _run_all(args)
    for name, data in first.items():
        assert (out / name).read_bytes() == data, name
    again = json.loads((out / "eval_background.json").read_text())
    report.pop("timings_s"), again.pop("timings_s")
    assert report == again


def test_classify_training_video_is_exact_match(workspace, capsys):
    out, args, train, _ = workspace
    _run_all(args)
    manifest = load_manifest(train)
    entry = next(e for e in manifest.entries if e.background_label == 2)
    capsys.readouterr()
    assert main(["classify", str(entry.path), *args]) == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].startswith(f"{entry.video_id}.lsfd: {manifest.class_names[2]}")

    config = PipelineConfig()
    model = network.load_model(out / "model.lsfm")
    selector = features.load_selector(out / "selector.lsfs")
    idx = simindex.load_index(out / "index.lsfi")
    query = features.apply_selection(selector, pipeline.video_feature(model, entry.path, config.block_widths))
    hits = [c for c in simindex.query_knn(idx, query, 5) if c.video_id == entry.video_id]
    assert hits and hits[0].distance == 0.0
    vote = simindex.classify(idx, query, 5)
    assert vote.predicted == 2 and vote.confidences.argmax() == 2


def test_foreground_task(workspace):
    out, args, *_ = workspace
    _run_all(args)
    assert main(["build-index", "--quiet", "--task", "foreground", *args, "--index", str(out / "fg.lsfi")]) == 0
    idx = simindex.load_index(out / "fg.lsfi")
    assert idx.class_names == ("no_foreground", "foreground")
    assert main(["evaluate", "--quiet", "--task", "foreground", *args]) == 0
    report = json.loads((out / "eval_foreground.json").read_text())
    assert np.array(report["confusion"]).shape == (2, 2)


def test_parallel_extraction_matches_serial(workspace):
    out, args, *_ = workspace
    assert main(["train-fusion", "--quiet", *args]) == 0
    assert main(["extract", "--quiet", *args]) == 0
    serial = (out / "train_features.csv").read_bytes()
    assert main(["extract", "--quiet", *args, "--set", "workers=3"]) == 0
    assert (out / "train_features.csv").read_bytes() == serial


def test_extraction_failure_is_collected(workspace, tmp_path, capsys):
    out, args, train, _ = workspace
    assert main(["train-fusion", "--quiet", *args]) == 0
    manifest = load_manifest(train)
    broken = tmp_path / "broken"
    shutil.copytree(manifest.entries[0].path.parent.parent, broken)
    bad = broken / "descriptors" / f"{manifest.entries[1].video_id}.lsfd"
    bad.write_bytes(bad.read_bytes()[:-10])
    override = ["--train-manifest", str(broken / "train_manifest.txt")]
    assert main(["extract", *args, *override]) == 2
    assert "failed train_" in capsys.readouterr().out
    ids, _ = features.read_features_csv(out / "train_features.csv")
    assert len(ids) == 59 and manifest.entries[1].video_id not in ids


def test_usage_errors_exit_1(workspace):
    _, args, *_ = workspace
    assert main(["no-such-command"]) == 1
    assert main(["train-fusion", "--set", "novalue", *args]) == 1
    assert main(["extract", "--split", "middle"]) == 1


def test_data_errors_exit_2(workspace, tmp_path, capsys):
    out, args, *_ = workspace
    assert main(["fit-selector", *args]) == 2      # no features yet
    _run_all(args)
    raw = (out / "selector.lsfs").read_bytes()
    (out / "selector.lsfs").write_bytes(b"JUNK" + raw[4:])
    capsys.readouterr()
    assert main(["build-index", *args]) == 2
    err = capsys.readouterr().err
    assert "selector.lsfs" in err and "expected 'LSFS'" in err
    assert main(["train-fusion", "--set", "nope=1", *args]) == 2


def test_divergence_exit_3(workspace, capsys):
    _, args, *_ = workspace
    with np.errstate(all="ignore"):
        code = main(["train-fusion", "--quiet", *args, "--set", "lr_autoencoder=1e8", "--set", "lr_classifier=1e8"])
    assert code == 3
    assert "epoch" in capsys.readouterr().err


def test_gen_synthetic_and_gradcheck(tmp_path, capsys):
    assert main(["gen-synthetic", "--out", str(tmp_path / "d"), "--train", "12", "--test", "6",
                 "--min-points", "5", "--max-points", "9", "--quiet"]) == 0
    m = load_manifest(tmp_path / "d" / "train_manifest.txt")
    assert len(m) == 12 and m.class_names[0] == "tree_waving"
    assert np.bincount(m.labels(), minlength=6).tolist() == [2] * 6
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.strip().endswith("< 1e-05)")


def test_random_pairs_flag(workspace):
    out, args, *_ = workspace
    _run_all(args)
    assert main(["evaluate", "--quiet", "--random-pairs", "3", *args]) == 0
    pairs = json.loads((out / "eval_background.json").read_text())["pairs"]
    assert len(pairs) == 3 and all(10 <= p["N"] <= 50 and 50 <= p["K"] <= 100 for p in pairs)
