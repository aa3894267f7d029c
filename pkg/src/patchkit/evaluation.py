"""Binary classification metrics, ROC/AUC, and the repeated k-fold harness.

Conventions: label 1 is the positive class and a score >= 0.5 counts as a
positive prediction. Sensitivity (specificity) is NaN, never a silent 0, when
there are no positives (negatives) to score.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, UndefinedMetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class EvalReport:
    counts: ConfusionCounts
    acc: float
    sen: float
    spe: float
    roc: list[tuple[float, float]]
    auc: float
    folds: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "counts": {"tp": self.counts.tp, "tn": self.counts.tn,
                       "fp": self.counts.fp, "fn": self.counts.fn},
            "acc": self.acc,
            "sen": self.sen,
            "spe": self.spe,
            "roc": [[x, y] for x, y in self.roc],
            "auc": self.auc,
            "folds": self.folds,
            "summary": self.summary,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _check_labels_scores(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if labels.size == 0:
        raise InvalidArgumentError("labels/scores must be nonempty")
    if labels.size != scores.size:
        raise InvalidArgumentError(f"{labels.size} labels vs {scores.size} scores")
    if not np.all((labels == 0) | (labels == 1)):
        raise InvalidArgumentError("labels must be 0 or 1")
    return labels, scores


def metrics(labels, scores, threshold: float = 0.5) -> tuple[ConfusionCounts, float, float, float]:
    """Confusion counts plus ACC/SEN/SPE at the given score threshold."""
    labels, scores = _check_labels_scores(labels, scores)
    pred = scores >= threshold
    pos = labels == 1
    counts = ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )
    acc = (counts.tp + counts.tn) / counts.total
    sen = counts.tp / (counts.tp + counts.fn) if (counts.tp + counts.fn) else math.nan
    spe = counts.tn / (counts.tn + counts.fp) if (counts.tn + counts.fp) else math.nan
    return counts, acc, sen, spe


def auc(labels, scores) -> float:
    """Area under the ROC via the rank (Mann-Whitney) formulation, ties at 0.5.

    Equivalent to trapezoidal integration over all distinct score thresholds.
    """
    labels, scores = _check_labels_scores(labels, scores)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_points(labels, scores) -> list[tuple[float, float]]:
    """(FPR, TPR) at every distinct threshold, descending, ends pinned to (0,0)/(1,1)."""
    labels, scores = _check_labels_scores(labels, scores)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    points = [(0.0, 0.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tpr = float(np.sum(pred & (labels == 1))) / n_pos
        fpr = float(np.sum(pred & (labels == 0))) / n_neg
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def evaluate_scores(labels, scores) -> EvalReport:
    """Single-split report: threshold-0.5 metrics plus the full ROC and AUC."""
    counts, acc, sen, spe = metrics(labels, scores)
    return EvalReport(
        counts=counts, acc=acc, sen=sen, spe=spe,
        roc=roc_points(labels, scores), auc=auc(labels, scores),
    )


def kfold_indices(
    labels, k: int = 5, repeats: int = 10, seed: int = 0, stratified: bool = True
) -> list[list[np.ndarray]]:
    """Test-fold index arrays for ``repeats`` seeded shuffles of k folds.

    Stratified folds deal each class round-robin after a per-repeat shuffle,
    keeping class proportions within one sample; the plain variant shuffles
    the whole index range.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if k < 2:
        raise InvalidArgumentError("k must be >= 2")
    if stratified:
        smallest = min(int(np.sum(labels == c)) for c in np.unique(labels))
        if k > smallest:
            raise InvalidArgumentError(
                f"k={k} exceeds the smallest class size {smallest}"
            )
    elif k > labels.size:
        raise InvalidArgumentError(f"k={k} exceeds sample count {labels.size}")
    all_repeats = []
    for rep in range(repeats):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, rep))))
        folds: list[list[int]] = [[] for _ in range(k)]
        if stratified:
            for cls in np.unique(labels):
                idx = np.flatnonzero(labels == cls)
                idx = idx[rng.permutation(len(idx))]
                for pos, sample in enumerate(idx):
                    folds[pos % k].append(int(sample))
        else:
            idx = rng.permutation(labels.size)
            for pos, sample in enumerate(idx):
                folds[pos % k].append(int(sample))
        all_repeats.append([np.array(sorted(f), dtype=np.int64) for f in folds])
    return all_repeats


def aggregate_folds(fold_reports: list[dict]) -> dict:
    """Mean and sample std (ddof=1) of each metric across fold reports."""
    if not fold_reports:
        raise InvalidArgumentError("no fold reports to aggregate")
    summary = {}
    for key in ("acc", "sen", "spe", "auc"):
        vals = np.array([r[key] for r in fold_reports], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            summary[key] = {"mean": math.nan, "std": math.nan}
        else:
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            summary[key] = {"mean": float(vals.mean()), "std": std}
    return summary


def write_roc_csv(path, roc: list[tuple[float, float]]) -> None:
    lines = ["fpr,tpr"] + [f"{x:.10g},{y:.10g}" for x, y in roc]
    Path(path).write_text("\n".join(lines) + "\n")
