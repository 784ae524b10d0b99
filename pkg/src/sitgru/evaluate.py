"""Frame scoring: reconstruction error, regularity, ROC/AUC/EER, heatmaps and the loss/optimizer sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import DimensionError

log = logging.getLogger(__name__)


@dataclass
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def reconstruction_error(frame, recon) -> float:
    """Euclidean distance over all pixels."""
    a = np.asarray(frame, dtype=np.float64)
    b = np.asarray(recon, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"frame {a.shape} vs reconstruction {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum()))


def interpolate_costs(centres, costs, times) -> np.ndarray:
    """Piecewise-linear cost curve through ``(centres, costs)``, constant beyond the ends."""
    return np.interp(np.asarray(times, dtype=np.float64), centres, costs)


def frame_costs_from_cuboids(cuboid_costs: Sequence[tuple[float, float]], frame_count: int,
                             group_size: int = 1) -> np.ndarray:
    """Per-frame costs from ``(centre_time, cost)`` pairs of consecutive cuboids.

    Consecutive cuboids are first averaged in groups of ``group_size``
    (centre and cost alike); the group averages are then interpolated to
    every integer frame index.
    """
    if len(cuboid_costs) == 0:
        raise ValueError("need at least one cuboid cost")
    if group_size < 1:
        raise ValueError("group_size must be positive")
    centres = np.array([c for c, _ in cuboid_costs], dtype=np.float64)
    costs = np.array([v for _, v in cuboid_costs], dtype=np.float64)
    if np.any(np.diff(centres) <= 0):
        raise ValueError("cuboid centres must be strictly increasing")
    if group_size > 1:
        groups = range(0, len(costs), group_size)
        centres = np.array([centres[g:g + group_size].mean() for g in groups])
        costs = np.array([costs[g:g + group_size].mean() for g in groups])
    return interpolate_costs(centres, costs, np.arange(frame_count))


def regularity_score(errors) -> np.ndarray:
    """``1 - (e - min e) / max e`` over one video; all ones when every error is zero.

    The range is ``[min/max, 1]``, not [0, 1], because the denominator is the
    unshifted maximum.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("need at least one reconstruction error")
    if np.any(e < 0):
        raise ValueError("reconstruction errors must be non-negative")
    top = e.max()
    if top == 0:
        return np.ones_like(e)
    return 1.0 - (e - e.min()) / top


def rates(tp: int, fn: int, fp: int, tn: int) -> tuple[float, float]:
    if tp + fn <= 0 or fp + tn <= 0:
        raise ValueError(f"rates undefined for counts tp={tp} fn={fn} fp={fp} tn={tn}")
    return tp / (tp + fn), fp / (tn + fp)


def roc_curve(scores, labels) -> list[RocPoint]:
    """Exact ROC: one point per distinct score plus the two infinite thresholds.

    A frame is flagged anomalous when its score is >= the threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores for {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos, neg = int(y.sum()), int((1 - y).sum())
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs both anomalous and normal frames; labels are all one class")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    points = [RocPoint(np.inf, 0.0, 0.0)]
    for k in last:
        tpr, fpr = rates(int(tp[k]), pos - int(tp[k]), int(fp[k]), neg - int(fp[k]))
        points.append(RocPoint(float(s_sorted[k]), tpr, fpr))
    points.append(RocPoint(-np.inf, 1.0, 1.0))
    return points


def auc_from_points(points: Sequence[RocPoint]) -> float:
    fpr = np.array([p.fpr for p in points])
    tpr = np.array([p.tpr for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def eer_crossing(points: Sequence[RocPoint]) -> tuple[float, float]:
    """(FPR, TPR) where the ROC polyline crosses FPR = 1 - TPR, interpolated inside the crossing segment."""
    gap = [p.fpr - (1.0 - p.tpr) for p in points]
    for k in range(1, len(points)):
        if gap[k] >= 0:
            a, b = points[k - 1], points[k]
            if gap[k] == gap[k - 1]:
                return b.fpr, b.tpr
            lam = -gap[k - 1] / (gap[k] - gap[k - 1])
            return a.fpr + lam * (b.fpr - a.fpr), a.tpr + lam * (b.tpr - a.tpr)
    return points[-1].fpr, points[-1].tpr


def eer_from_points(points: Sequence[RocPoint]) -> float:
    return eer_crossing(points)[0]


def roc_auc_eer(scores, labels) -> tuple[list[RocPoint], float, float]:
    points = roc_curve(scores, labels)
    return points, auc_from_points(points), eer_from_points(points)


def pairwise_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), by brute force over all pairs."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    diff = s[y][:, None] - s[~y][None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def residual_heatmap(frame, recon) -> np.ndarray:
    """Absolute residual, min-max scaled to [0, 1] within the frame."""
    a = np.asarray(frame, dtype=np.float64)
    b = np.asarray(recon, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"frame {a.shape} vs reconstruction {b.shape}")
    r = np.abs(a - b)
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.zeros_like(r) if hi == 0 else np.ones_like(r)
    return (r - lo) / (hi - lo)


@dataclass
class SweepCell:
    loss: object
    optimizer: object
    auc: float = float("nan")
    eer: float = float("nan")
    status: str = "ok"
    error: str = ""


@dataclass
class SweepResult:
    dataset: str
    cells: list[SweepCell] = field(default_factory=list)
    best: SweepCell | None = None


def select_best(cells: Sequence[SweepCell]) -> SweepCell | None:
    """Highest AUC; ties go to the lower EER, then to the earlier cell."""
    best = None
    for c in cells:
        if c.status != "ok":
            continue
        if best is None or c.auc > best.auc or (c.auc == best.auc and c.eer < best.eer):
            best = c
    return best


def sweep_loss_optimizer(grid: Sequence[tuple], train_eval: Callable[[object, object], tuple[float, float]],
                         dataset: str = "synthetic") -> SweepResult:
    """Run ``train_eval(loss, optimizer) -> (auc, eer)`` on every grid cell.

    A failing cell is recorded with status ``failed`` and the sweep carries on.
    """
    if len(grid) == 0:
        raise ValueError("loss/optimizer grid is empty")
    result = SweepResult(dataset)
    for loss, opt in grid:
        cell = SweepCell(loss, opt)
        try:
            cell.auc, cell.eer = (float(v) for v in train_eval(loss, opt))
        except Exception as exc:  # noqa: BLE001 - one bad cell must not abort the sweep
            log.warning("sweep cell %s/%s failed: %s", loss, opt, exc)
            cell.status, cell.error = "failed", str(exc)
        result.cells.append(cell)
    result.best = select_best(result.cells)
    return result
