"""Losses, first-order optimizers and the minibatch training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .network import Model, backward_cuboid, forward_cuboid
from .rng import derive_rng
from .tensor import DimensionError

log = logging.getLogger(__name__)

XENT_CLAMP = 1e-7


class LossKind(Enum):
    MSE = "mse"
    XENT = "xent"


class OptimizerKind(Enum):
    ADAM = "adam"
    ADAGRAD = "adagrad"
    RMSPROP = "rmsprop"
    SGD = "sgd"


def loss_value_and_grad(kind: LossKind, recon, target) -> tuple[float, np.ndarray]:
    """Mean elementwise loss and its gradient w.r.t. ``recon``.

    XENT is pixelwise binary cross-entropy with predictions clamped to
    [1e-7, 1 - 1e-7]; inside the clamp region the gradient is zero.
    """
    p = np.asarray(recon, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"reconstruction {p.shape} vs target {t.shape}")
    count = p.size
    if kind is LossKind.MSE:
        diff = p - t
        return float((diff * diff).sum() / count), 2.0 * diff / count
    if kind is LossKind.XENT:
        if t.min() < 0.0 or t.max() > 1.0:
            raise ValueError("cross-entropy targets must lie in [0, 1]")
        q = np.clip(p, XENT_CLAMP, 1.0 - XENT_CLAMP)
        value = -(t * np.log(q) + (1.0 - t) * np.log(1.0 - q)).sum() / count
        grad = (q - t) / (q * (1.0 - q)) / count
        grad[(p < XENT_CLAMP) | (p > 1.0 - XENT_CLAMP)] = 0.0
        return float(value), grad
    raise ValueError(f"unknown loss {kind!r}")


@dataclass
class OptimizerState:
    kind: OptimizerKind
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.9999
    eps: float = 1e-8
    decay: float = 0.9  # RMSprop
    step_count: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return them."""
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        slot = state.slots.setdefault(name, {})
        if state.kind is OptimizerKind.SGD:
            p -= state.lr * g
        elif state.kind is OptimizerKind.ADAM:
            m = slot.setdefault("m", np.zeros_like(p))
            v = slot.setdefault("v", np.zeros_like(p))
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        elif state.kind is OptimizerKind.ADAGRAD:
            acc = slot.setdefault("acc", np.zeros_like(p))
            acc += g * g
            p -= state.lr * g / (np.sqrt(acc) + state.eps)
        elif state.kind is OptimizerKind.RMSPROP:
            v = slot.setdefault("v", np.zeros_like(p))
            v *= state.decay
            v += (1.0 - state.decay) * g * g
            p -= state.lr * g / (np.sqrt(v) + state.eps)
        else:
            raise ValueError(f"unknown optimizer {state.kind!r}")
    return params


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    split: float = 0.85
    loss: LossKind = LossKind.MSE
    optimizer: OptimizerKind = OptimizerKind.ADAM
    seed: int = 0
    lr: float = 1e-5
    clip_norm: float | None = None

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must be in (0, 1), got {self.split}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


def _stack(data: Sequence, T: int) -> np.ndarray:
    out = []
    for c in data:
        arr = c.as_matrix() if hasattr(c, "as_matrix") else np.asarray(c, dtype=np.float64)
        out.append(arr.reshape(T, -1))
    return np.stack(out)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def evaluate_loss(model: Model, cuboids: np.ndarray, kind: LossKind, batch_size: int) -> float:
    """Inference-mode loss averaged over every element of ``cuboids``."""
    total = 0.0
    for start in range(0, len(cuboids), batch_size):
        chunk = cuboids[start:start + batch_size]
        recon, _ = forward_cuboid(model, chunk, training=False)
        value, _ = loss_value_and_grad(kind, recon, chunk)
        total += value * len(chunk)
    return total / len(cuboids)


def split_indices(n: int, split: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ValueError(f"need at least 2 cuboids to split train/validation, got {n}")
    order = derive_rng(seed, "split").permutation(n)
    n_train = min(max(int(round(split * n)), 1), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def fit(model: Model, data: Sequence, cfg: TrainConfig,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[Model, list[EpochRecord]]:
    """Train ``model`` to reconstruct its inputs.

    Returns the model snapshot from the epoch with the lowest validation
    loss and the per-epoch records.  ``model`` itself ends in its
    last-epoch state.
    """
    T = model.config.T
    cuboids = _stack(data, T)
    train_idx, val_idx = split_indices(len(cuboids), cfg.split, cfg.seed)
    train, val = cuboids[train_idx], cuboids[val_idx]
    opt = OptimizerState(cfg.optimizer, lr=cfg.lr)
    params = model.parameters()
    records: list[EpochRecord] = []
    best, best_loss = model.copy(), np.inf
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = derive_rng(cfg.seed, f"epoch{epoch}").permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = train[order[start:start + cfg.batch_size]]
            recon, cache = forward_cuboid(model, batch, training=True)
            value, d_recon = loss_value_and_grad(cfg.loss, recon, batch)
            grads = backward_cuboid(model, cache, d_recon)
            if cfg.clip_norm is not None:
                _clip(grads, cfg.clip_norm)
            optimizer_step(opt, params, grads)
            total += value * len(batch)
        val_loss = evaluate_loss(model, val, cfg.loss, cfg.batch_size)
        seconds = max(time.perf_counter() - started, 1e-9)
        rec = EpochRecord(epoch, total / len(train), val_loss, seconds)
        records.append(rec)
        log.info("epoch %d train %.6g val %.6g (%.2fs)", epoch, rec.train_loss, val_loss, seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_loss:
            best, best_loss = model.copy(), val_loss
    return best, records


def write_epoch_csv(records: Sequence[EpochRecord], path, include_seconds: bool = True) -> None:
    cols = ["epoch", "train_loss", "val_loss"] + (["seconds"] if include_seconds else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            row = [r.epoch, repr(r.train_loss), repr(r.val_loss)]
            if include_seconds:
                row.append(f"{r.seconds:.6f}")
            w.writerow(row)
