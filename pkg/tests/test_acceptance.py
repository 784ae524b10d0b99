"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict; the lines are printed in the
pytest terminal summary, or directly when this file is run as a script.
"""

import csv
import functools
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from sitgru import gradcheck
from sitgru.cells import CellKind, CellParams, gru_step, param_count, step, unroll_sequence
from sitgru.cli import main as cli_main
from sitgru.data import SyntheticConfig
from sitgru.evaluate import eer_crossing, pairwise_auc, regularity_score, roc_auc_eer
from sitgru.network import NetworkConfig, init_model, recurrent_param_ratio
from sitgru.optim import TrainConfig, fit
from sitgru.pipeline import desk_benchmark, epoch_timings, prepare_training, synthetic_train_videos

VERDICTS: dict[int, str] = {}


def criterion(number: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except AssertionError as exc:
                VERDICTS[number] = f"FAIL [{number:>2}] {title}: {exc}"
                raise
            VERDICTS[number] = f"PASS [{number:>2}] {title}: {detail}"
        return run
    return wrap


def _random_params(kind, d, n, rng):
    p = CellParams.init(kind, d, n, rng)
    for v in p.tensors.values():
        v += rng.normal(scale=0.5, size=v.shape)
    return p


@criterion(1, "gradient correctness")
def test_gradient_correctness():
    started = time.process_time()
    results = gradcheck.run(tuple(CellKind), seeds=20)
    elapsed = time.process_time() - started
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.worst)
    assert not failed, f"{len(failed)} checks at or above 1e-4, worst {worst}"
    assert elapsed < 120, f"took {elapsed:.1f}s CPU"
    return (f"{len(results)} checks, worst rel err {worst.worst:.2e} "
            f"({worst.kind.value} {worst.scope} {worst.where}), {elapsed:.1f}s CPU")


@criterion(2, "parameter-count identity")
def test_parameter_count_identity():
    pairs = [(d, n) for d in (1, 2, 3, 8, 16, 32, 1024) for n in (1, 2, 5, 8, 16, 32)]
    for d, n in pairs:
        sit, gru = param_count(CellKind.SITGRU, d, n), param_count(CellKind.GRU, d, n)
        assert Fraction(sit, gru) == Fraction(2, 3), (d, n)
        assert sit == 2 * (d * n + n * n + n) == CellParams.zeros(CellKind.SITGRU, d, n).size(), (d, n)
    for units in ([32, 16, 8, 16, 32, 1], [4, 2, 1], [7, 1]):
        cfg = NetworkConfig(units, CellKind.GRU, frame_pixels=64)
        s = init_model(NetworkConfig(units, CellKind.SITGRU, frame_pixels=64), np.random.default_rng(0))
        g = init_model(cfg, np.random.default_rng(0))
        assert Fraction(s.recurrent_param_count(), g.recurrent_param_count()) == Fraction(2, 3)
        assert recurrent_param_ratio(cfg, CellKind.SITGRU, CellKind.GRU) == 2 / 3
    return f"ratio exactly 2/3 on {len(pairs)} (d, n) pairs and 3 network layouts"


@criterion(3, "reset-gate equivalence")
def test_reset_gate_equivalence():
    trials = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d, n = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        gru = _random_params(CellKind.GRU, d, n, rng)
        alt = CellParams.zeros(CellKind.SITGRU_TANH_NORESET, d, n)
        for name in alt.names():
            alt[name][...] = gru[name]
        h_a = h_b = rng.uniform(-1, 1, size=(3, n))
        for x in rng.normal(scale=3, size=(10, 3, d)):
            h_a = gru_step(gru, x, h_a, reset_gate=np.ones(n)).h
            h_b = step(alt, x, h_b).h
            assert np.array_equal(h_a, h_b), f"seed {seed}"
            trials += 1
    return f"{trials} forward steps bit-identical"


@criterion(4, "no-update-gate flat curve")
def test_no_update_flat_curve():
    rng = np.random.default_rng(0)
    p = _random_params(CellKind.GRU_NO_UPDATE, 4, 3, rng)
    h0 = rng.uniform(size=3)
    states, h_T = unroll_sequence(p, list(rng.normal(size=(50, 4))), h0)
    assert np.array_equal(h_T, h0) and all(np.array_equal(s.h, h0) for s in states)
    cuboids = list(rng.uniform(size=(40, 4, 16)))
    model = init_model(NetworkConfig([8, 4, 8, 1], CellKind.GRU_NO_UPDATE, frame_pixels=16, T=4), rng)
    _, records = fit(model, cuboids, TrainConfig(epochs=12, lr=1e-3, seed=0))
    train_var = float(np.var([r.train_loss for r in records]))
    val_var = float(np.var([r.val_loss for r in records]))
    assert train_var < 1e-12 and val_var < 1e-12, (train_var, val_var)
    return f"h_T == h_0 exactly; loss variance train {train_var:.1e}, val {val_var:.1e} over 12 epochs"


@criterion(5, "scoring oracles")
def test_scoring_oracles():
    rng = np.random.default_rng(0)
    worst_reg = 0.0
    for _ in range(100):
        e = rng.uniform(0, 10, size=int(rng.integers(1, 200)))
        expected = [1.0 - (v - min(e)) / max(e) for v in e]
        worst_reg = max(worst_reg, float(np.max(np.abs(regularity_score(e) - expected))))
    worst_auc = worst_eer = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        points, auc, eer = roc_auc_eer(scores, labels)
        worst_auc = max(worst_auc, abs(auc - pairwise_auc(scores, labels)))
        fpr, tpr = eer_crossing(points)
        assert fpr == eer
        worst_eer = max(worst_eer, abs(fpr - (1.0 - tpr)))
    assert worst_reg <= 1e-12 and worst_auc <= 1e-9 and worst_eer <= 1e-9, (worst_reg, worst_auc, worst_eer)
    return f"regularity {worst_reg:.1e}, AUC vs pairwise {worst_auc:.1e}, EER residual {worst_eer:.1e}"


@criterion(6, "desk-scale detection")
def test_desk_scale_detection():
    started = time.process_time()
    result = desk_benchmark(CellKind.SITGRU, seed=0, epochs=60, synth=SyntheticConfig())
    elapsed = time.process_time() - started
    assert len(result.records) == 60
    assert result.score.auc > 0.7, f"AUC {result.score.auc:.4f}"
    assert elapsed < 600, f"took {elapsed:.0f}s CPU"
    return f"AUC {result.score.auc:.4f}, EER {result.score.eer:.4f}, {elapsed:.0f}s CPU"


@criterion(7, "timing trend")
def test_timing_trend():
    synth = SyntheticConfig()
    _, cuboids = prepare_training(synthetic_train_videos(synth, 1, 0), (32, 32), 4)
    net = NetworkConfig(frame_pixels=32 * 32, T=4)
    cfg = TrainConfig(epochs=3, lr=1e-3)
    ordered, medians = 0, []
    for _ in range(5):
        t = epoch_timings([CellKind.SITGRU, CellKind.GRU, CellKind.LSTM], cuboids, net, cfg)
        m = [float(np.median(t[k])) for k in (CellKind.SITGRU, CellKind.GRU, CellKind.LSTM)]
        medians.append(m)
        ordered += m[0] < m[1] < m[2]
    assert ordered >= 4, f"ordered in {ordered}/5, medians {medians}"
    mean = np.mean(medians, axis=0)
    return f"SITGRU < GRU < LSTM in {ordered}/5 reps (mean medians {mean[0]:.3f}/{mean[1]:.3f}/{mean[2]:.3f}s)"


@criterion(8, "boundedness")
def test_boundedness():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d, n = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        p = _random_params(CellKind.SITGRU, d, n, rng)
        scale = 10.0 ** rng.uniform(-2, 3)
        xs = rng.normal(scale=scale, size=(1000, d))
        h = rng.uniform(size=n)
        for t, x in enumerate(xs):
            h = step(p, x, h).h
            assert np.all((h >= 0.0) & (h <= 1.0)), f"seed {seed} step {t}: {h}"
    return "20 unrolls of 1000 steps stayed componentwise in [0, 1]"


@criterion(9, "determinism")
def test_determinism(tmp_path):
    args = ["train", "--synth", "default", "--epochs", "3", "--train-videos", "1", "--seed", "11"]
    for d in ("a", "b"):
        assert cli_main(args + ["--out", str(tmp_path / d)]) == 0
    for name in ("epochs.csv", "model.ckpt"):
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        assert a == b, f"{name} differs"
    size = (tmp_path / "a" / "model.ckpt").stat().st_size
    return f"epochs.csv and model.ckpt ({size} bytes) byte-identical across two runs"


@criterion(10, "sweep protocol")
def test_sweep_protocol(tmp_path):
    assert cli_main(["sweep", "--synth", "default", "--epochs", "5", "--train-videos", "1",
                     "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    table = list(csv.DictReader(lines[:-1]))
    assert {(r["loss"], r["optimizer"]) for r in table} == {
        (l, o) for l in ("mse", "xent") for o in ("adagrad", "adam", "rmsprop")}
    assert all(r["status"] == "ok" for r in table), table
    best = table[0]
    for r in table[1:]:
        if float(r["auc"]) > float(best["auc"]) or (
                float(r["auc"]) == float(best["auc"]) and float(r["eer"]) < float(best["eer"])):
            best = r
    assert lines[-1] == f"best={best['loss']},{best['optimizer']}", (lines[-1], best)
    return f"6/6 cells ok, {lines[-1]} (AUC {float(best['auc']):.4f}) matches brute-force max"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
