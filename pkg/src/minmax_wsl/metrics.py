"""Image-level and pixel-level evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .masks import BINARY_THRESHOLD

RECALL_GRID = np.round(np.arange(1001) * 1e-3, 10)


def classification_error(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Percentage of mismatched predictions."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"classification_error: {preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise ValueError("classification_error: empty input")
    return 100.0 * float(np.count_nonzero(preds != labels)) / preds.size


def _dice_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def f1_scores(pred_mask: np.ndarray, gt_mask: np.ndarray, threshold: float = BINARY_THRESHOLD) -> Tuple[float, float]:
    """Foreground and background F1 (Dice) of the binarized prediction, in [0, 1].

    If both masks are empty for a polarity that F1 is 1; if exactly one is
    empty it is 0.
    """
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"f1_scores: prediction shape {pred_mask.shape} != ground truth shape {gt_mask.shape}")
    p = pred_mask >= threshold
    g = gt_mask.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return _dice_counts(tp, fp, fn), _dice_counts(tn, fn, fp)


def dice_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """``2 |A & B| / (|A| + |B|)`` by counting index sets; both empty gives 1."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dice_oracle: shapes {a.shape} and {b.shape} differ")
    set_a = {tuple(i) for i in np.argwhere(a.astype(bool))}
    set_b = {tuple(i) for i in np.argwhere(b.astype(bool))}
    if not set_a and not set_b:
        return 1.0
    return 2.0 * len(set_a & set_b) / (len(set_a) + len(set_b))


def pr_curve(scores: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Precision/recall when sweeping a threshold down through the unique scores.

    Returns recall ascending with, for repeated recall values, the best
    precision reached at that recall.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = np.asarray(gt).astype(bool).ravel()
    order = np.argsort(-s, kind="stable")
    s, g = s[order], g[order]
    tp = np.cumsum(g)
    fp = np.cumsum(~g)
    # last index of each run of equal scores = one threshold
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp, fp = tp[last], fp[last]
    recall = tp / g.sum()
    precision = tp / (tp + fp)
    uniq, inv = np.unique(recall, return_inverse=True)
    best = np.full(uniq.shape, -np.inf)
    np.maximum.at(best, inv, precision)
    return uniq, best


def interpolate_precision(recall: np.ndarray, precision: np.ndarray, grid: np.ndarray = RECALL_GRID) -> np.ndarray:
    """Piecewise-linear precision on ``grid``, held constant outside the achieved recall range."""
    return np.interp(grid, recall, precision, left=precision[0], right=precision[-1])


def avg_pr_curve(
    pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], polarity: str = "fg"
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Mean precision over images on the fixed recall grid.

    ``polarity="bg"`` scores background with ``1 - pred`` against ``1 - gt``.
    Images whose ground truth has no positive pixel for the polarity are
    skipped; the count is returned as the third element.
    """
    if polarity not in ("fg", "bg"):
        raise ValueError(f"avg_pr_curve: polarity must be 'fg' or 'bg', got {polarity!r}")
    curves = []
    skipped = 0
    for pred, gt in zip(pred_masks, gt_masks):
        if gt is None:
            continue
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt).astype(bool)
        if polarity == "bg":
            pred, gt = 1.0 - pred, ~gt
        if not gt.any():
            skipped += 1
            continue
        r, p = pr_curve(pred, gt)
        curves.append(interpolate_precision(r, p))
    if not curves:
        raise ValueError("avg_pr_curve: no image with a usable ground truth")
    return RECALL_GRID.copy(), np.mean(curves, axis=0), skipped


@dataclass
class MetricsReport:
    classification_error: float
    f1_plus: Optional[float] = None
    f1_minus: Optional[float] = None
    rows: List[dict] = field(default_factory=list)
    pr_curve_fg: Optional[Tuple[np.ndarray, np.ndarray]] = None
    pr_curve_bg: Optional[Tuple[np.ndarray, np.ndarray]] = None
    skipped_fg: int = 0
    skipped_bg: int = 0


def evaluate_predictions(
    ids: Sequence[str],
    labels: Sequence[int],
    preds: Sequence[int],
    pred_masks: Sequence[np.ndarray],
    gt_masks: Sequence[Optional[np.ndarray]],
    with_pr: bool = True,
) -> MetricsReport:
    """Aggregate per-image metrics; pixel metrics use only images with a ground-truth mask."""
    rows = []
    f1p, f1m = [], []
    for i, y, yh, pm, gm in zip(ids, labels, preds, pred_masks, gt_masks):
        row = {"id": i, "label": int(y), "pred": int(yh), "f1_plus": "", "f1_minus": ""}
        if gm is not None:
            fp_, fm_ = f1_scores(pm, gm)
            row["f1_plus"], row["f1_minus"] = 100.0 * fp_, 100.0 * fm_
            f1p.append(fp_)
            f1m.append(fm_)
        rows.append(row)
    report = MetricsReport(classification_error(preds, labels), rows=rows)
    if f1p:
        report.f1_plus = 100.0 * float(np.mean(f1p))
        report.f1_minus = 100.0 * float(np.mean(f1m))
        if with_pr:
            with_gt = [(p, g) for p, g in zip(pred_masks, gt_masks) if g is not None]
            pm, gm = zip(*with_gt)
            for pol in ("fg", "bg"):
                try:
                    grid, prec, skipped = avg_pr_curve(pm, gm, pol)
                except ValueError:
                    grid, prec, skipped = None, None, len(pm)
                if pol == "fg":
                    report.pr_curve_fg = None if grid is None else (grid, prec)
                    report.skipped_fg = skipped
                else:
                    report.pr_curve_bg = None if grid is None else (grid, prec)
                    report.skipped_bg = skipped
    return report


def all_ones_baseline(gt_masks: Sequence[Optional[np.ndarray]]) -> Tuple[float, float]:
    """F1+ / F1- (percent) of the constant full-image mask predictor."""
    masks = [np.asarray(g) for g in gt_masks if g is not None]
    if not masks:
        raise ValueError("all_ones_baseline: no ground-truth masks")
    scores = [f1_scores(np.ones(g.shape), g) for g in masks]
    return 100.0 * float(np.mean([s[0] for s in scores])), 100.0 * float(np.mean([s[1] for s in scores]))


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


METRIC_FIELDS = ["id", "label", "pred", "f1_plus", "f1_minus"]


def write_metrics_csv(path: Union[str, Path], report: MetricsReport) -> None:
    """One row per sample plus a trailing ``__summary__`` row (error in the ``pred`` column)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in report.rows:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
        w.writerow(["__summary__", "", _fmt(report.classification_error), _fmt(report.f1_plus), _fmt(report.f1_minus)])


def write_pr_csv(path: Union[str, Path], curve: Tuple[np.ndarray, np.ndarray]) -> None:
    recall, precision = curve
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in zip(recall, precision):
            w.writerow([f"{r:.3f}", f"{p:.6f}"])
