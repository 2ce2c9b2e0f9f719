"""Evaluation suite: per-class precision/recall/F, ROC/AUC, Gamma-index noise.

The AUC numerator is accumulated in integer counts and divided once, so the
trapezoid sweep agrees bit-for-bit with a tie-aware pairwise comparison
count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, EmptyError, IoError

_OFFSETS = {
    4: ((-1, 0), (0, -1), (0, 1), (1, 0)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float


@dataclass
class ClassReport:
    """Confusion-matrix metrics per class (index 0 = dry, 1 = flood) plus their mean F."""

    classes: tuple[ClassScores, ClassScores]
    avg_f: float


@dataclass
class RocCurve:
    points: np.ndarray  # (k, 2) rows of (false positive rate, true positive rate)
    auc: float


def _flatten(grid: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    grid = np.asarray(grid)
    if mask is None:
        return grid.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.shape:
        raise DataError(f"mask shape {mask.shape} != grid shape {grid.shape}")
    return grid[mask]


def class_report(
    pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None
) -> ClassReport:
    """Precision/recall/F per class over the masked pixels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    p = _flatten(pred, mask)
    t = _flatten(truth, mask)
    if p.size == 0:
        raise EmptyError("empty evaluation mask")
    scores = []
    for cls in (0, 1):
        tp = int(np.sum((p == cls) & (t == cls)))
        fp = int(np.sum((p == cls) & (t != cls)))
        fn = int(np.sum((p != cls) & (t == cls)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(ClassScores(precision=precision, recall=recall, f1=f1))
    return ClassReport(classes=(scores[0], scores[1]), avg_f=(scores[0].f1 + scores[1].f1) / 2)


def roc_auc(
    scores: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None
) -> RocCurve:
    """Threshold sweep over the unique scores; AUC by the trapezoid rule.

    Equals the Mann-Whitney statistic exactly, ties counting one half.
    """
    s = np.asarray(_flatten(np.asarray(scores, dtype=float), mask))
    t = np.asarray(_flatten(truth, mask))
    if s.shape != t.shape:
        raise DataError("scores and truth differ in size")
    if not np.all(np.isfinite(s)):
        raise DataError("scores contain non-finite values")
    n_pos = int(np.sum(t == 1))
    n_neg = int(np.sum(t == 0))
    if n_pos == 0 or n_neg == 0:
        raise EmptyError("ROC needs both classes present")
    values, inverse = np.unique(s, return_inverse=True)
    pos_per = np.bincount(inverse[t == 1], minlength=values.size)
    neg_per = np.bincount(inverse[t == 0], minlength=values.size)
    # Sweep from the highest score down; each unique value is one threshold.
    pos_per = pos_per[::-1]
    neg_per = neg_per[::-1]
    tp = np.cumsum(pos_per)
    fp = np.cumsum(neg_per)
    tp_prev = np.concatenate([[0], tp[:-1]])
    numerator = int(np.sum(neg_per * (2 * tp_prev + pos_per)))
    auc = numerator / (2 * n_pos * n_neg)
    points = np.concatenate(
        [[[0.0, 0.0]], np.stack([fp / n_neg, tp / n_pos], axis=1)], axis=0
    )
    return RocCurve(points=points, auc=auc)


def gamma_index(pred: np.ndarray, pixel: tuple[int, int], neighborhood: int = 8) -> float:
    """Local agreement statistic in [-1, 1].

    Classes map to +/-1; the statistic averages the products with the
    existing grid neighbors, so border pixels just use fewer terms. A pixel
    with no neighbors at all scores 0.
    """
    pred = np.asarray(pred)
    h, w = pred.shape
    r, c = pixel
    if not (0 <= r < h and 0 <= c < w):
        raise DataError(f"pixel ({r},{c}) outside {h}x{w} grid")
    if neighborhood not in _OFFSETS:
        raise DataError(f"neighborhood must be 4 or 8, got {neighborhood}")
    own = 1 if pred[r, c] else -1
    num = 0
    count = 0
    for dr, dc in _OFFSETS[neighborhood]:
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w:
            num += own * (1 if pred[rr, cc] else -1)
            count += 1
    return num / count if count else 0.0


def salt_pepper_count(pred: np.ndarray, neighborhood: int = 8) -> int:
    """Number of pixels whose local Gamma index is strictly negative."""
    pred = np.asarray(pred)
    if neighborhood not in _OFFSETS:
        raise DataError(f"neighborhood must be 4 or 8, got {neighborhood}")
    sign = np.where(pred.astype(bool), 1, -1).astype(np.int64)
    h, w = sign.shape
    neighbor_sum = np.zeros((h, w), dtype=np.int64)
    for dr, dc in _OFFSETS[neighborhood]:
        src_r = slice(max(dr, 0), h + min(dr, 0))
        dst_r = slice(max(-dr, 0), h + min(-dr, 0))
        src_c = slice(max(dc, 0), w + min(dc, 0))
        dst_c = slice(max(-dc, 0), w + min(-dc, 0))
        neighbor_sum[dst_r, dst_c] += sign[src_r, src_c]
    # Gamma's sign is the sign of own * neighbor_sum; the denominator is positive.
    return int(np.sum(sign * neighbor_sum < 0))


def report_rows(method: str, report: ClassReport) -> list[tuple[str, str, str, str, str]]:
    """CSV rows (method, class, precision, recall, f1)."""
    names = ("dry", "flood")
    return [
        (
            method,
            names[cls],
            f"{report.classes[cls].precision:.6f}",
            f"{report.classes[cls].recall:.6f}",
            f"{report.classes[cls].f1:.6f}",
        )
        for cls in (0, 1)
    ]


def write_roc_csv(curve: RocCurve, path: str) -> None:
    """Two-column fpr,tpr CSV for external plotting."""
    try:
        with open(path, "w") as fh:
            fh.write("fpr,tpr\n")
            for fpr, tpr in curve.points:
                fh.write(f"{fpr:.17g},{tpr:.17g}\n")
    except OSError as exc:
        raise IoError(f"cannot write ROC points to {path}: {exc}") from exc
