"""Evaluation metrics: ROC-AUC, pointing game, Dice with threshold search, pixel AUC."""
import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from ._backend import kernels
from .errors import DegenerateLabels, DimensionMismatch, EmptyMasks
from .store import _atomic_write

SIGMOID_INTERVAL = 0.01
SOFTMAX_INTERVAL = 0.001


def _values(m):
    return np.asarray(getattr(m, "values", m))


def roc_auc(scores, labels):
    """Mann-Whitney estimate of P(pos > neg) + 0.5 P(tie), using mid-ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise DimensionMismatch(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # mid-rank of each tie group (1-based ranks)
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], sorted_scores.size]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty_like(scores)
    ranks[order] = np.repeat(group_rank, ends - starts)
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def argmax_pixel(values):
    """Row-major first occurrence of the maximum, as ``(row, col)``."""
    v = _values(values)
    return np.unravel_index(int(np.argmax(v)), v.shape)


def pointing_game(pmap, boxes):
    """1 if the map's argmax lies inside any ``(x0, y0, x1, y1)`` box (inclusive)."""
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    row, col = argmax_pixel(pmap)
    for x0, y0, x1, y1 in boxes:
        if x0 <= col <= x1 and y0 <= row <= y1:
            return 1
    return 0


def thresholds_for(interval):
    n = int(round(1.0 / interval))
    if n < 1 or abs(n * interval - 1.0) > 1e-9:
        raise ValueError(f"interval {interval} must divide 1")
    return np.arange(n + 1, dtype=np.float64) / n


def dice_curve(maps, masks, interval=SIGMOID_INTERVAL, pooled=False, thresholds=None):
    """Dice at every candidate threshold; returns ``(thresholds, dice)``."""
    t = thresholds_for(interval) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if len(maps) != len(masks):
        raise DimensionMismatch(f"{len(maps)} maps vs {len(masks)} masks")
    if not maps:
        raise EmptyMasks("no samples")
    per_sample, tot_inter, tot_denom = [], np.zeros(t.size), np.zeros(t.size)
    for m, g in zip(maps, masks):
        v = _values(m)
        g = np.asarray(g).astype(bool)
        if v.shape != g.shape:
            raise DimensionMismatch(f"map {v.shape} vs mask {g.shape}")
        n_g = int(g.sum())
        if n_g == 0:
            raise EmptyMasks("dice search uses positive samples only")
        pred, inter = kernels.threshold_counts(v, g, t)
        per_sample.append(2.0 * inter / (pred + n_g))
        tot_inter += inter
        tot_denom += pred + n_g
    dice = 2.0 * tot_inter / tot_denom if pooled else np.mean(per_sample, axis=0)
    return t, dice


def dice_with_search(maps, masks, interval=SIGMOID_INTERVAL, pooled=False, thresholds=None):
    """Best ``(threshold, dice)`` over the scan; ties resolve to the lowest threshold."""
    t, dice = dice_curve(maps, masks, interval, pooled, thresholds)
    k = int(np.argmax(dice))
    return float(t[k]), float(dice[k])


def pixel_auc(maps, masks):
    """ROC-AUC over every pixel of every sample, positives and negatives pooled."""
    if len(maps) != len(masks):
        raise DimensionMismatch(f"{len(maps)} maps vs {len(masks)} masks")
    scores = np.concatenate([_values(m).ravel() for m in maps]) if maps else np.empty(0)
    labels = np.concatenate([np.asarray(g).ravel().astype(bool) for g in masks]) if masks else np.empty(0, bool)
    return roc_auc(scores, labels)


@dataclass
class MetricResult:
    metric: str
    value: float
    n: int
    threshold: float = None


def write_report(json_path, results, csv_path=None):
    rows = [asdict(r) for r in results]
    _atomic_write(json_path, (json.dumps(rows, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["metric", "value", "n", "threshold"])
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})
