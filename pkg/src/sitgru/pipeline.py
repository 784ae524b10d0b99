"""End-to-end helpers: synthetic datasets, training, video scoring and per-epoch timing."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .cells import CellKind
from .data import (
    Cuboid,
    FrameSequence,
    PreprocessStats,
    SyntheticConfig,
    build_cuboids,
    compute_stats,
    preprocess,
    synth_generate,
    to_unit_range,
)
from .evaluate import (
    RocPoint,
    frame_costs_from_cuboids,
    reconstruction_error,
    regularity_score,
    roc_auc_eer,
)
from .network import Model, NetworkConfig, forward_cuboid, init_model
from .optim import EpochRecord, TrainConfig, fit
from .rng import derive_rng, derive_seed


def synthetic_train_videos(base: SyntheticConfig, count: int, seed: int) -> list[FrameSequence]:
    """Anomaly-free videos that differ only in their derived seeds."""
    return [synth_generate(replace(base, window=(0, 0), seed=derive_seed(seed, f"train-video{i}")))[0]
            for i in range(count)]


def synthetic_test_video(base: SyntheticConfig, seed: int) -> tuple[FrameSequence, np.ndarray]:
    seq, labels = synth_generate(replace(base, seed=derive_seed(seed, "test-video")))
    seq.split = "test"
    return seq, labels


def prepare_training(videos: Sequence[FrameSequence], target: tuple[int, int], T: int,
                     strides: Sequence[int] = (1, 2, 3)) -> tuple[PreprocessStats, list[Cuboid]]:
    """Statistics over all training frames, then cuboids built per video in [0, 1]."""
    pooled = FrameSequence(np.concatenate([v.frames for v in videos]), split="train")
    stats = compute_stats(pooled, target)
    cuboids = []
    for v in videos:
        unit = to_unit_range(preprocess(v, stats, target)[0], stats)
        cuboids += build_cuboids(unit, T, strides)
    return stats, cuboids


def train(net: NetworkConfig, cfg: TrainConfig, cuboids: Sequence[Cuboid], on_epoch=None
          ) -> tuple[Model, list[EpochRecord]]:
    model = init_model(net, derive_rng(cfg.seed, "init"))
    return fit(model, cuboids, cfg, on_epoch)


@dataclass
class VideoScore:
    frame_errors: np.ndarray
    regularity: np.ndarray
    scores: np.ndarray  # 1 - regularity
    cuboid_costs: list[tuple[float, float]]
    recon_frames: np.ndarray  # (L, H, W), mean over covering cuboids
    labels: np.ndarray | None = None
    roc: list[RocPoint] | None = None
    auc: float | None = None
    eer: float | None = None


def score_video(model: Model, unit: FrameSequence, labels=None, group_size: int = 1,
                batch_size: int = 32) -> VideoScore:
    """Reconstruct every stride-1 cuboid of a preprocessed video and score its frames."""
    T = model.config.T
    cuboids = build_cuboids(unit, T, (1,))
    X = np.stack([c.as_matrix() for c in cuboids])
    recon = np.concatenate([forward_cuboid(model, X[i:i + batch_size], training=False)[0]
                            for i in range(0, len(X), batch_size)])
    costs = [(c.centre, reconstruction_error(X[i], recon[i])) for i, c in enumerate(cuboids)]
    errors = frame_costs_from_cuboids(costs, len(unit), group_size)
    regularity = regularity_score(errors)

    H, W = unit.size
    acc = np.zeros((len(unit), H * W))
    hits = np.zeros(len(unit))
    for i, c in enumerate(cuboids):
        acc[c.indices] += recon[i]
        hits[c.indices] += 1
    result = VideoScore(errors, regularity, 1.0 - regularity, costs,
                        (acc / hits[:, None]).reshape(len(unit), H, W))
    if labels is not None:
        result.labels = np.asarray(labels, dtype=int)
        result.roc, result.auc, result.eer = roc_auc_eer(result.scores, result.labels)
    return result


@dataclass
class BenchmarkResult:
    model: Model
    records: list[EpochRecord]
    stats: PreprocessStats
    score: VideoScore


def desk_benchmark(kind: CellKind = CellKind.SITGRU, seed: int = 0, epochs: int = 60,
                   lr: float = 1e-3, train_videos: int = 4, synth: SyntheticConfig | None = None,
                   cfg: TrainConfig | None = None, units: Sequence[int] = (32, 16, 8, 16, 32, 1),
                   T: int = 4) -> BenchmarkResult:
    """Train on anomaly-free synthetic videos and score one anomalous test video."""
    synth = synth or SyntheticConfig()
    target = (synth.height, synth.width)
    stats, cuboids = prepare_training(synthetic_train_videos(synth, train_videos, seed), target, T)
    cfg = cfg or TrainConfig(epochs=epochs, lr=lr, seed=seed)
    net = NetworkConfig(list(units), kind, frame_pixels=target[0] * target[1], T=T)
    model, records = train(net, cfg, cuboids)
    test, labels = synthetic_test_video(synth, seed)
    unit = to_unit_range(preprocess(test, stats, target)[0], stats)
    return BenchmarkResult(model, records, stats, score_video(model, unit, labels))


def epoch_timings(kinds: Sequence[CellKind], cuboids: Sequence[Cuboid], net: NetworkConfig,
                  cfg: TrainConfig) -> dict[CellKind, list[float]]:
    """Per-epoch wall-clock seconds for identically configured models of each kind."""
    out = {}
    for kind in kinds:
        _, records = train(replace(net, cell_kind=kind), cfg, cuboids)
        out[kind] = [r.seconds for r in records]
    return out


def timing_summary(seconds: Sequence[float]) -> tuple[float, float, float]:
    return min(seconds), max(seconds), statistics.median(seconds)
