"""Command-line entry point: ``sitgru {train,eval,gradcheck,bench,sweep,synth}``.

Settings resolve as flags > ``--config`` file (flat ``key = value`` lines) >
defaults.  Exit codes: 0 success, 1 usage error, 2 data or I/O error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .cells import CellKind
from .data import (
    AnomalyType,
    DatasetManifest,
    FrameSequence,
    PreprocessStats,
    SyntheticConfig,
    load_frames,
    preprocess,
    synth_generate,
    to_unit_range,
    write_dataset,
    write_pgm,
)
from .evaluate import sweep_loss_optimizer
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .optim import LossKind, OptimizerKind, TrainConfig, write_epoch_csv
from .pipeline import (
    epoch_timings,
    prepare_training,
    score_video,
    synthetic_test_video,
    synthetic_train_videos,
    timing_summary,
    train,
)
from . import gradcheck

log = logging.getLogger("sitgru")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    cell: str = "sitgru"
    loss: str = "mse"
    opt: str = "adam"
    lr: float = 1e-3
    frame_size: int = 32
    t: int = 4
    epochs: int = 60
    batch: int = 8
    split: float = 0.85
    units: str = "32,16,8,16,32,1"
    strides: str = "1,2,3"
    manifest: str = ""
    synth: str = ""
    train_videos: int = 4
    length: int = 60
    anomaly: str = "speed"
    speed: float = 2.0
    speed_factor: float = 3.0
    window: str = "20,40"
    checkpoint: str = ""
    group: int = 1
    heatmaps: bool = False
    svg: bool = False
    kinds: str = "gru,sitgru,sitgru_tanh,sitgru_relu,gru_no_update,lstm"
    gradcheck_seeds: int = 20
    reps: int = 1
    losses: str = "mse,xent"
    opts: str = "adagrad,adam,rmsprop"

    def cell_kind(self) -> CellKind:
        return _enum(CellKind, self.cell, "cell")

    def int_list(self, name: str) -> list[int]:
        try:
            return [int(v) for v in str(getattr(self, name)).split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"{name}: expected comma-separated integers, got {getattr(self, name)!r}")

    def synthetic(self, seed: int | None = None, normal: bool = False) -> SyntheticConfig:
        window = [0, 0] if normal else self.int_list("window")
        if len(window) != 2:
            raise UsageError(f"window: expected start,end, got {self.window!r}")
        try:
            return SyntheticConfig(height=self.frame_size, width=self.frame_size, length=self.length,
                                   speed=self.speed, anomaly=_enum(AnomalyType, self.anomaly, "anomaly"),
                                   speed_factor=self.speed_factor, window=tuple(window),
                                   seed=self.seed if seed is None else seed,
                                   object_size=max(1, min(6, self.frame_size // 2 - 1)))
        except ValueError as exc:
            raise UsageError(f"synthetic config: {exc}") from exc

    def network(self, kind: CellKind | None = None) -> NetworkConfig:
        try:
            return NetworkConfig(self.int_list("units"), kind or self.cell_kind(),
                                 frame_pixels=self.frame_size ** 2, T=self.t)
        except ValueError as exc:
            raise UsageError(f"units: {exc}") from exc

    def training(self, loss: LossKind | None = None, opt: OptimizerKind | None = None) -> TrainConfig:
        try:
            return TrainConfig(epochs=self.epochs, batch_size=self.batch, split=self.split,
                               loss=loss or _enum(LossKind, self.loss, "loss"),
                               optimizer=opt or _enum(OptimizerKind, self.opt, "opt"),
                               seed=self.seed, lr=self.lr)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


def _enum(cls, value: str, field_name: str):
    try:
        return cls(value)
    except ValueError:
        choices = "|".join(m.value for m in cls)
        raise UsageError(f"{field_name}: {value!r} is not one of {choices}") from None


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key = value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    layers = [read_config_file(args.config)] if args.config else []
    layers.append({k: v for k, v in vars(args).items() if k in types and v is not None})
    for layer in layers:
        for key, raw in layer.items():
            if key not in types:
                raise UsageError(f"unknown config field {key!r}")
            setattr(cfg, key, _coerce(key, types[key], raw))
    return cfg


def _coerce(key: str, type_name, raw):
    type_name = getattr(type_name, "__name__", type_name)
    if not isinstance(raw, str):
        return raw
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {type_name}") from None
    return raw


def write_run_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "seed": cfg.seed, "config": asdict(cfg)}
    doc.update(extra or {})
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _training_videos(cfg: RunConfig) -> list[FrameSequence]:
    if cfg.manifest:
        seq, _ = load_frames(DatasetManifest.read(cfg.manifest), split="train")
        if len(seq) == 0:
            raise UsageError(f"training manifest {cfg.manifest} lists no frames")
        return [seq]
    if cfg.synth:
        if cfg.synth != "default":
            raise UsageError(f"synth: only 'default' is defined, got {cfg.synth!r}")
        return synthetic_train_videos(cfg.synthetic(), cfg.train_videos, cfg.seed)
    raise UsageError("no training data: pass --manifest PATH or --synth default")


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    target = (cfg.frame_size, cfg.frame_size)
    stats, cuboids = prepare_training(_training_videos(cfg), target, cfg.t, cfg.int_list("strides"))
    net, tc = cfg.network(), cfg.training()
    best, records = train(net, tc, cuboids,
                          on_epoch=lambda r: log.info("epoch %d train=%.6g val=%.6g %.2fs",
                                                      r.epoch, r.train_loss, r.val_loss, r.seconds))
    best_epoch = min(records, key=lambda r: (r.val_loss, r.epoch)).epoch
    save_checkpoint(best, out / "model.ckpt", extras=stats.to_arrays(),
                    meta={"best_epoch": best_epoch, "frame_size": list(target)})
    write_epoch_csv(records, out / "epochs.csv", include_seconds=False)
    with (out / "epoch_times.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for r in records:
            w.writerow([r.epoch, f"{r.seconds:.6f}"])
    write_run_manifest(out, "train", cfg, {"best_epoch": best_epoch, "cuboids": len(cuboids)})
    print(f"trained {net.cell_kind.value} for {len(records)} epochs; best epoch {best_epoch}; "
          f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _svg_polyline(xs, ys, title: str, x_label: str, y_label: str) -> str:
    w, h, pad = 480, 320, 40
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y0, y1 = min(0.0, float(ys.min())), max(1.0, float(ys.max()))
    px = pad + (xs - x0) / ((x1 - x0) or 1.0) * (w - 2 * pad)
    py = h - pad - (ys - y0) / ((y1 - y0) or 1.0) * (h - 2 * pad)
    path = "M " + " L ".join(f"{a:.2f} {b:.2f}" for a, b in zip(px, py))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">\n'
            f'<text x="{w / 2}" y="20" text-anchor="middle">{title}</text>\n'
            f'<path d="M {pad} {pad} L {pad} {h - pad} L {w - pad} {h - pad}" stroke="black" fill="none"/>\n'
            f'<text x="{w / 2}" y="{h - 8}" text-anchor="middle">{x_label}</text>\n'
            f'<text x="12" y="{h / 2}" transform="rotate(-90 12 {h / 2})" text-anchor="middle">{y_label}</text>\n'
            f'<path d="{path}" stroke="steelblue" fill="none"/>\n</svg>\n')


def cmd_eval(cfg: RunConfig, frame_size_given: bool = False) -> int:
    out = Path(cfg.out)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    try:
        model, extras, meta = load_checkpoint(ckpt)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {ckpt}: {exc.strerror or exc}") from exc
    stats = PreprocessStats.from_arrays(extras)
    target = tuple(meta.get("frame_size", stats.global_mean_image.shape))
    if frame_size_given and (cfg.frame_size, cfg.frame_size) != target:
        raise UsageError(f"checkpoint expects {target[0]}x{target[1]} frames but "
                         f"--frame-size asks for {cfg.frame_size}x{cfg.frame_size}")
    if cfg.manifest:
        seq, labels = load_frames(DatasetManifest.read(cfg.manifest), split="test")
        if len(seq) == 0:
            raise UsageError(f"test manifest {cfg.manifest} lists no frames")
    elif cfg.synth:
        seq, labels = synthetic_test_video(cfg.synthetic(), cfg.seed)
    else:
        raise UsageError("no test data: pass --manifest PATH or --synth default")
    if len(seq) < model.config.T:
        raise UsageError(f"test video has {len(seq)} frames; the model needs at least {model.config.T}")
    unit = to_unit_range(preprocess(seq, stats, target)[0], stats)
    result = score_video(model, unit, labels, group_size=cfg.group)

    out.mkdir(parents=True, exist_ok=True)
    with (out / "scores.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "error", "regularity", "label", "score"])
        for t in range(len(unit)):
            w.writerow([t, repr(float(result.frame_errors[t])), repr(float(result.regularity[t])),
                        int(labels[t]), repr(float(result.scores[t]))])
    with (out / "roc.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for p in result.roc:
            w.writerow([repr(p.threshold), repr(p.fpr), repr(p.tpr)])
    summary = {
        "auc": result.auc,
        "eer": result.eer,
        "frames": len(unit),
        "best_epoch": meta.get("best_epoch"),
        "cell": model.config.cell_kind.value,
        "mean_regularity": float(result.regularity.mean()),
    }
    times = ckpt.parent / "epoch_times.csv"
    if times.exists():
        with times.open() as fh:
            secs = [float(r["seconds"]) for r in csv.DictReader(fh)]
        if secs:
            lo, hi, med = timing_summary(secs)
            summary["timing"] = {"min_s": lo, "max_s": hi, "median_s": med}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.heatmaps:
        from .evaluate import residual_heatmap
        heat_dir = out / "heatmaps"
        heat_dir.mkdir(exist_ok=True)
        for t in range(len(unit)):
            write_pgm(heat_dir / f"heat_{t:05d}.pgm",
                      255.0 * residual_heatmap(unit.frames[t], result.recon_frames[t]))
    if cfg.svg:
        (out / "regularity.svg").write_text(
            _svg_polyline(np.arange(len(unit)), result.regularity, "Regularity score", "frame", "r_s"))
        (out / "roc.svg").write_text(_svg_polyline(
            [p.fpr for p in result.roc], [p.tpr for p in result.roc], "ROC", "FPR", "TPR"))
    write_run_manifest(out, "eval", cfg, {"checkpoint": str(ckpt)})
    print(f"AUC {result.auc:.4f}  EER {result.eer:.4f}  over {len(unit)} frames")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, inject_fault: bool = False) -> int:
    kinds = [_enum(CellKind, k.strip(), "kinds") for k in cfg.kinds.split(",") if k.strip()]
    mutate = gradcheck.flip_first_sign if inject_fault else None
    ok = True
    for kind in kinds:
        results = gradcheck.run([kind], seeds=cfg.gradcheck_seeds, mutate=mutate)
        worst = max(results, key=lambda r: r.worst)
        passed = all(r.passed for r in results)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {kind.value:<14} worst={worst.worst:.3e} "
              f"({worst.scope} {worst.where})")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_bench(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    target = (cfg.frame_size, cfg.frame_size)
    _, cuboids = prepare_training(_training_videos(cfg) if (cfg.manifest or cfg.synth) else
                                  synthetic_train_videos(cfg.synthetic(), 1, cfg.seed),
                                  target, cfg.t, cfg.int_list("strides"))
    kinds = [CellKind.SITGRU, CellKind.GRU, CellKind.LSTM]
    pooled = {k: [] for k in kinds}
    per_rep = []
    for rep in range(cfg.reps):
        timings = epoch_timings(kinds, cuboids, cfg.network(), cfg.training())
        for k in kinds:
            pooled[k] += timings[k]
            per_rep.append((rep, k.value, timing_summary(timings[k])[2]))
    with (out / "timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "min_s", "max_s", "median_s"])
        for k in kinds:
            w.writerow([k.value] + [f"{v:.6f}" for v in timing_summary(pooled[k])])
    if cfg.reps > 1:
        with (out / "timing_reps.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep", "kind", "median_s"])
            for rep, kind, med in per_rep:
                w.writerow([rep, kind, f"{med:.6f}"])
    write_run_manifest(out, "bench", cfg)
    for k in kinds:
        lo, hi, med = timing_summary(pooled[k])
        print(f"{k.value:<8} min {lo:.3f}s  max {hi:.3f}s  median {med:.3f}s")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    losses = [_enum(LossKind, v.strip(), "losses") for v in cfg.losses.split(",") if v.strip()]
    opts = [_enum(OptimizerKind, v.strip(), "opts") for v in cfg.opts.split(",") if v.strip()]
    grid = [(loss, opt) for loss in losses for opt in opts]
    if not grid:
        raise UsageError("loss/optimizer grid is empty")
    target = (cfg.frame_size, cfg.frame_size)
    stats, cuboids = prepare_training(_training_videos(cfg) if (cfg.manifest or cfg.synth) else
                                      synthetic_train_videos(cfg.synthetic(), cfg.train_videos, cfg.seed),
                                      target, cfg.t, cfg.int_list("strides"))
    test, labels = synthetic_test_video(cfg.synthetic(), cfg.seed)
    unit = to_unit_range(preprocess(test, stats, target)[0], stats)

    def train_eval(loss, opt):
        model, _ = train(cfg.network(), cfg.training(loss, opt), cuboids)
        res = score_video(model, unit, labels, group_size=cfg.group)
        log.info("sweep %s/%s auc=%.4f eer=%.4f", loss.value, opt.value, res.auc, res.eer)
        return res.auc, res.eer

    result = sweep_loss_optimizer(grid, train_eval, dataset="synthetic")
    write_sweep_csv(result, out / "sweep.csv")
    write_run_manifest(out, "sweep", cfg)
    for c in result.cells:
        print(f"{c.loss.value:<5} {c.optimizer.value:<8} auc={c.auc:.4f} eer={c.eer:.4f} {c.status}")
    if result.best is not None:
        print(f"best={result.best.loss.value},{result.best.optimizer.value}")
    return EXIT_OK


def write_sweep_csv(result, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss", "optimizer", "auc", "eer", "status"])
        for c in result.cells:
            w.writerow([c.loss.value, c.optimizer.value, repr(c.auc), repr(c.eer), c.status])
        best = result.best
        fh.write(f"best={best.loss.value},{best.optimizer.value}\n" if best else "best=none\n")


def cmd_synth(cfg: RunConfig, normal: bool = False) -> int:
    out = Path(cfg.out)
    synth = cfg.synthetic(normal=normal)
    seq, labels = synth_generate(synth)
    try:
        manifest = write_dataset(out, seq, labels)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc.strerror or exc}") from exc
    write_run_manifest(out, "synth", cfg, {"normal": normal})
    print(f"wrote {len(seq)} frames ({int(labels.sum())} anomalous) and {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--cell", choices=[k.value for k in CellKind])
    common.add_argument("--loss", choices=[k.value for k in LossKind])
    common.add_argument("--opt", choices=[k.value for k in OptimizerKind])
    common.add_argument("--lr", type=float)
    common.add_argument("--frame-size", dest="frame_size", type=int)
    common.add_argument("--t", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--units")
    common.add_argument("--strides")
    common.add_argument("--manifest", help="JSON-lines frame manifest")
    common.add_argument("--synth", help="use the named synthetic dataset ('default')")
    common.add_argument("--train-videos", dest="train_videos", type=int)
    common.add_argument("--length", type=int)
    common.add_argument("--anomaly", choices=[a.value for a in AnomalyType])
    common.add_argument("--speed-factor", dest="speed_factor", type=float)
    common.add_argument("--window", help="anomaly window start,end")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sitgru", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model")
    p = sub.add_parser("eval", parents=[common], help="score a test video")
    p.add_argument("--checkpoint")
    p.add_argument("--group", type=int, help="average cuboid costs in groups of this size")
    p.add_argument("--heatmaps", action="store_true", default=None)
    p.add_argument("--svg", action="store_true", default=None)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--kinds")
    p.add_argument("--gradcheck-seeds", dest="gradcheck_seeds", type=int)
    p.add_argument("--inject-sign-flip", dest="inject_fault", action="store_true", help=argparse.SUPPRESS)
    p = sub.add_parser("bench", parents=[common], help="per-epoch timing of SITGRU, GRU and LSTM")
    p.add_argument("--reps", type=int)
    p = sub.add_parser("sweep", parents=[common], help="loss x optimizer grid")
    p.add_argument("--losses")
    p.add_argument("--opts")
    p.add_argument("--group", type=int)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic PGM dataset")
    p.add_argument("--normal", action="store_true", help="no anomaly window")
    return parser


def _thread_limit():
    raw = os.environ.get("SITGRU_THREADS")
    if not raw:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(raw)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _thread_limit()
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, frame_size_given=args.frame_size is not None)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, inject_fault=args.inject_fault)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_synth(cfg, normal=args.normal)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
