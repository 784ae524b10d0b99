import csv
import json

import numpy as np
import pytest

from sitgru.cli import main
from sitgru.data import DatasetManifest, load_frames, preprocess, to_unit_range
from sitgru.network import load_checkpoint
from sitgru.pipeline import score_video

SMALL = ["--frame-size", "8", "--units", "4,2,4,1", "--length", "30", "--window", "10,20",
         "--train-videos", "1"]


def run(*args):
    return main([str(a) for a in args])


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--synth", "default", "--epochs", 5, "--out", out, *SMALL) == 0
    return out


def test_train_outputs(trained):
    assert len(rows(trained / "epochs.csv")) == 5
    assert len(rows(trained / "epoch_times.csv")) == 5
    manifest = json.loads((trained / "run.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["frame_size"] == 8 and manifest["version"]
    _, _, meta = load_checkpoint(trained / "model.ckpt")
    assert 1 <= meta["best_epoch"] <= 5


def test_train_is_byte_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("train", "--synth", "default", "--epochs", 3, "--out", tmp_path / d, *SMALL) == 0
    for name in ("epochs.csv", "model.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_no_update_cell_gives_constant_loss(tmp_path):
    assert run("train", "--synth", "default", "--epochs", 4, "--cell", "gru_no_update",
               "--out", tmp_path, *SMALL) == 0
    losses = [float(r["train_loss"]) for r in rows(tmp_path / "epochs.csv")]
    assert np.ptp(losses) < 1e-12


def test_eval_outputs(trained, tmp_path):
    out = tmp_path / "eval"
    assert run("eval", "--synth", "default", "--checkpoint", trained / "model.ckpt", "--out", out,
               "--heatmaps", "--svg", *SMALL) == 0
    scores = rows(out / "scores.csv")
    assert len(scores) == 30 and list(scores[0]) == ["frame", "error", "regularity", "label", "score"]
    assert sum(int(r["label"]) for r in scores) == 10
    assert list(rows(out / "roc.csv")[0]) == ["threshold", "fpr", "tpr"]
    summary = json.loads((out / "summary.json").read_text())
    assert 0 <= summary["auc"] <= 1 and "timing" in summary and summary["best_epoch"] >= 1
    assert len(list((out / "heatmaps").glob("*.pgm"))) == 30
    assert (out / "roc.svg").read_text().startswith("<svg")
    assert (out / "run.json").exists()


def test_training_video_is_more_regular_than_anomalous_one(trained, tmp_path):
    assert run("synth", "--out", tmp_path / "normal", "--normal", "--frame-size", 8, "--length", 30) == 0
    assert run("synth", "--out", tmp_path / "anom", "--seed", 1, *SMALL) == 0
    model, extras, _ = load_checkpoint(trained / "model.ckpt")
    from sitgru.data import PreprocessStats
    stats = PreprocessStats.from_arrays(extras)
    means = []
    for name in ("normal", "anom"):
        seq, _ = load_frames(DatasetManifest.read(tmp_path / name / "manifest.jsonl"))
        means.append(score_video(model, to_unit_range(preprocess(seq, stats, (8, 8))[0], stats)).regularity.mean())
    assert means[0] > means[1]


def test_eval_errors(trained, tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    ckpt = trained / "model.ckpt"
    assert run("eval", "--manifest", empty, "--checkpoint", ckpt, "--out", tmp_path) == 1
    assert run("eval", "--synth", "default", "--checkpoint", ckpt, "--out", tmp_path,
               "--frame-size", 16) == 1
    assert "8x8" in capsys.readouterr().err
    run("synth", "--out", tmp_path / "normal", "--normal", "--frame-size", 8, "--length", 30)
    assert run("eval", "--manifest", tmp_path / "normal" / "manifest.jsonl", "--checkpoint", ckpt,
               "--out", tmp_path) == 2
    assert "ROC needs both anomalous and normal frames; labels are all one class" in capsys.readouterr().err
    assert run("eval", "--manifest", tmp_path / "missing.jsonl", "--checkpoint", ckpt, "--out", tmp_path) == 2


def test_gradcheck_report(capsys):
    assert run("gradcheck", "--gradcheck-seeds", 1) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all(l.startswith("PASS") for l in lines)
    assert run("gradcheck", "--kinds", "sitgru", "--gradcheck-seeds", 1) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 1
    assert run("gradcheck", "--kinds", "gru", "--gradcheck-seeds", 1, "--inject-sign-flip") == 3
    assert capsys.readouterr().out.startswith("FAIL")


def test_bench_csv(tmp_path):
    assert run("bench", "--synth", "default", "--epochs", 2, "--out", tmp_path, *SMALL) == 0
    table = rows(tmp_path / "timing.csv")
    assert [r["kind"] for r in table] == ["sitgru", "gru", "lstm"]
    assert list(table[0]) == ["kind", "min_s", "max_s", "median_s"]


def test_sweep_csv(tmp_path):
    assert run("sweep", "--synth", "default", "--epochs", 2, "--out", tmp_path, *SMALL) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    table = list(csv.DictReader(lines[:-1]))
    assert len(table) == 6 and all(r["status"] == "ok" for r in table)
    best = max(table, key=lambda r: float(r["auc"]))
    assert lines[-1] == f"best={best['loss']},{best['optimizer']}"
    assert run("sweep", "--synth", "default", "--epochs", 1, "--losses", "xent", "--opts", "sgd",
               "--out", tmp_path / "one", *SMALL) == 0
    assert (tmp_path / "one" / "sweep.csv").read_text().splitlines()[-1] == "best=xent,sgd"


def test_synth_dataset(tmp_path):
    assert run("synth", "--out", tmp_path / "a") == 0
    assert run("synth", "--out", tmp_path / "b") == 0
    lines = (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 60 and sum(json.loads(l)["label"] for l in lines) == 20
    for f in (tmp_path / "a").glob("*.pgm"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth", "--out", blocker / "sub") == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# flat config\nlength = 30\nwindow = 5,9\nseed = 4\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "d", "--window", "5,15") == 0
    doc = json.loads((tmp_path / "d" / "run.json").read_text())
    assert doc["config"]["length"] == 30 and doc["config"]["window"] == "5,15" and doc["seed"] == 4
    cfg.write_text("epochz = 3\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "e") == 1
    cfg.write_text("epochs = many\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "e") == 1


def test_usage_errors(tmp_path):
    assert run("train", "--out", tmp_path) == 1
    assert run("train", "--cell", "rnn") == 1
    assert run("frobnicate") == 1


def test_thread_cap_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SITGRU_THREADS", "1")
    assert run("synth", "--out", tmp_path, "--length", 10, "--window", "2,4") == 0
