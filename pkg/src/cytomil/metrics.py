"""Slide-level evaluation metrics.

The binary slide score sums all positive-class probabilities (equivalently
1 - P(normal)). AUC is the rank statistic with ties counted half; the
specificity-at-sensitivity operating point tunes the score threshold so that
sensitivity stays at or above the target while specificity is maximal.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np


class MetricError(ValueError):
    pass


def binary_score(class_probs: np.ndarray) -> np.ndarray:
    """Sum of positive-class probabilities, i.e. 1 - P(class 0).

    Accepts a single distribution or a batch (last axis = classes).
    """
    p = np.asarray(class_probs, dtype=np.float64)
    if not np.isfinite(p).all() or (p < -1e-9).any():
        raise MetricError("class probabilities must be finite and non-negative")
    sums = p.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise MetricError(f"class probabilities must sum to 1, got {sums}")
    return 1.0 - p[..., 0]


def _check_binary(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores and labels must be equal-length vectors, got {s.shape} vs {y.shape}")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be binary 0/1")
    if y.min() == y.max():
        raise MetricError("both classes must be present")
    return s, y.astype(bool)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AUC as the normalized rank-sum statistic; tied pairs count half."""
    s, y = _check_binary(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def specificity_at_sensitivity(
    scores: Sequence[float], labels: Sequence[int], target: float = 0.95
) -> Tuple[float, float]:
    """(specificity, threshold) maximizing specificity subject to
    sensitivity >= target; ties resolved toward the highest threshold.

    A slide is called positive when its score is >= the threshold.
    """
    if not 0.0 < target <= 1.0:
        raise MetricError(f"target sensitivity must be in (0, 1], got {target}")
    s, y = _check_binary(scores, labels)
    pos, neg = s[y], s[~y]
    candidates = np.unique(s)  # ascending; thresholds between scores are equivalent
    best = (-1.0, -np.inf)
    for t in candidates:
        sens = float((pos >= t).mean())
        if sens < target:
            continue
        spec = float((neg < t).mean())
        if spec > best[0] or (spec == best[0] and t > best[1]):
            best = (spec, float(t))
    if best[0] < 0.0:
        # Guard: threshold below every score always yields sensitivity 1.
        t = float(candidates[0])
        best = (float((neg < t).mean()), t)
    return best


def confusion_matrix(pred: Sequence[int], true: Sequence[int], n_classes: int) -> np.ndarray:
    """Rows = true class, columns = predicted class."""
    p = np.asarray(pred, dtype=np.int64)
    t = np.asarray(true, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise MetricError("pred and true must be equal-length vectors")
    if len(p) == 0:
        raise MetricError("empty input")
    if (p < 0).any() or (p >= n_classes).any() or (t < 0).any() or (t >= n_classes).any():
        raise MetricError(f"class ids must be in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def f1_macro(
    pred: Sequence[int],
    true: Sequence[int],
    n_classes: int,
    include_absent: bool = False,
) -> float:
    """Unweighted mean of per-class F1.

    By default only classes present in the ground truth are averaged, so a
    split that simply lacks a class does not deflate the score; set
    ``include_absent`` to average over all classes regardless.
    """
    cm = confusion_matrix(pred, true, n_classes)
    f1s: List[float] = []
    for c in range(n_classes):
        support = cm[c, :].sum()
        predicted = cm[:, c].sum()
        if not include_absent and support == 0:
            continue
        tp = cm[c, c]
        denom = 2 * tp + (predicted - tp) + (support - tp)
        f1s.append(2.0 * tp / denom if denom > 0 else 0.0)
    if not f1s:
        raise MetricError("no classes to average")
    return float(np.mean(f1s))


def topk_recall(
    scores_per_bag: Sequence[Sequence[float]],
    latents_per_bag: Sequence[Sequence[int]],
    k: int,
) -> float:
    """Fraction of positive bags whose top-k scored cells include at least one
    latent-positive cell. Requires oracle latent labels."""
    from .bags import topk_select

    hits = 0
    n_positive_bags = 0
    for scores, latents in zip(scores_per_bag, latents_per_bag):
        latents = np.asarray(latents)
        if (latents > 0).sum() == 0:
            continue
        n_positive_bags += 1
        chosen = topk_select(scores, k)
        if (latents[chosen] > 0).any():
            hits += 1
    if n_positive_bags == 0:
        raise MetricError("no positive bags")
    return hits / n_positive_bags
