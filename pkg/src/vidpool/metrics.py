"""Ranking metrics (GAP, Hit@1, AUC) and McNemar's paired significance test."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class ScoredPrediction(NamedTuple):
    video_id: str
    label: int
    confidence: float


def top_predictions(
    probs_by_video: dict[str, np.ndarray], n_per_video: int = 20
) -> list[ScoredPrediction]:
    """Top-n labels per video by confidence, as one flat prediction list."""
    out: list[ScoredPrediction] = []
    for vid in sorted(probs_by_video):
        probs = np.asarray(probs_by_video[vid], dtype=np.float64)
        order = sorted(range(probs.shape[0]), key=lambda c: (-probs[c], c))
        for c in order[:n_per_video]:
            out.append(ScoredPrediction(vid, c, float(probs[c])))
    return out


def _pooled_rank_order(preds: list[ScoredPrediction]) -> list[ScoredPrediction]:
    # descending confidence; ties broken by (video id, label) so the
    # ranking is identical on every platform
    return sorted(preds, key=lambda p: (-p.confidence, p.video_id, p.label))


def gap(
    preds: list[ScoredPrediction],
    truth: dict[str, set[int]],
    n_per_video: int = 20,
) -> float:
    """Average precision of the pooled prediction ranking.

    Each video contributes at most ``n_per_video`` predictions (top by
    confidence); the hit at rank k adds precision@k / (total ground-truth
    labels).
    """
    if not truth:
        raise ValueError("empty ground truth")
    by_video: dict[str, list[ScoredPrediction]] = {}
    for p in preds:
        by_video.setdefault(p.video_id, []).append(p)
    kept: list[ScoredPrediction] = []
    for vid, plist in by_video.items():
        plist = sorted(plist, key=lambda p: (-p.confidence, p.label))
        kept.extend(plist[:n_per_video])

    total_positives = sum(len(labels) for labels in truth.values())
    if total_positives == 0:
        raise ValueError("ground truth has no labels")

    hits = 0
    ap = 0.0
    for rank, p in enumerate(_pooled_rank_order(kept), start=1):
        if p.label in truth.get(p.video_id, ()):
            hits += 1
            ap += hits / rank
    return ap / total_positives


def hit_at_1(preds: list[ScoredPrediction], truth: dict[str, set[int]]) -> float:
    """Fraction of videos whose single top prediction is a true label."""
    if not truth:
        raise ValueError("empty ground truth")
    best: dict[str, ScoredPrediction] = {}
    for p in preds:
        cur = best.get(p.video_id)
        if cur is None or (-p.confidence, p.label) < (-cur.confidence, cur.label):
            best[p.video_id] = p
    hits = sum(
        1 for vid, labels in truth.items() if vid in best and best[vid].label in labels
    )
    return hits / len(truth)


def auc(scores, labels) -> float:
    """Rank-based ROC AUC; tied scores get their average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of ranks i+1..j+1
        i = j + 1
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mcnemar(correct_a, correct_b) -> tuple[float, float]:
    """Continuity-corrected McNemar chi-square and its p-value.

    b counts items A got right and B wrong; c the reverse.  With no
    discordant pairs the statistic is 0 and p is 1.
    """
    a = np.asarray(correct_a).astype(bool)
    bv = np.asarray(correct_b).astype(bool)
    if a.shape != bv.shape:
        raise ValueError("paired vectors must have equal length")
    b = int(np.sum(a & ~bv))
    c = int(np.sum(~a & bv))
    if b + c == 0:
        return 0.0, 1.0
    chi2 = (abs(b - c) - 1.0) ** 2 / (b + c)
    # one-degree chi-square survival function
    p = math.erfc(math.sqrt(chi2 / 2.0))
    return chi2, p
