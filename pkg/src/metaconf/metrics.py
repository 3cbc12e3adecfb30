"""Correctness labeling and the evaluation metric suite.

Ranking metrics (AUROC, AUPR, FPR at 95% TPR) treat the estimator score as
a ranking of samples; sparsification metrics (AUSE) compare the error of
the retained set, as low-confidence samples are removed one at a time,
against the best possible removal order. All are deterministic, brute-force
checkable functions; undefined cases raise instead of returning a guess.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import model
from .errors import ConfigError, DimensionError, UndefinedMetricError

RELATIVE_DIFF_THRESHOLD = 0.25


def correctness_label(task_pred: float, ground_truth: float, mode: str) -> int:
    """1 if the task prediction counts as correct, else 0.

    Regression: the relative difference |pred - gt| / |gt| must be strictly
    below 0.25. With gt exactly 0 the prediction is correct only if it is
    exactly 0 as well. Classification: plain equality.
    """
    if mode == "classification":
        return int(task_pred == ground_truth)
    if mode == "regression":
        if ground_truth == 0.0:
            return int(task_pred == 0.0)
        return int(abs(task_pred - ground_truth) / abs(ground_truth) < RELATIVE_DIFF_THRESHOLD)
    raise ConfigError(f"unknown correctness mode {mode!r}")


def correctness_labels(task_pred: np.ndarray, ground_truth: np.ndarray, mode: str) -> np.ndarray:
    """Vectorized ``correctness_label``."""
    p = np.asarray(task_pred, dtype=np.float64).ravel()
    g = np.asarray(ground_truth, dtype=np.float64).ravel()
    if p.size != g.size:
        raise DimensionError(f"{p.size} predictions vs {g.size} ground truths")
    if mode == "classification":
        return (p == g).astype(np.int64)
    if mode == "regression":
        out = np.zeros(p.size, dtype=np.int64)
        nz = g != 0.0
        out[nz] = np.abs(p[nz] - g[nz]) / np.abs(g[nz]) < RELATIVE_DIFF_THRESHOLD
        out[~nz] = p[~nz] == 0.0
        return out
    raise ConfigError(f"unknown correctness mode {mode!r}")


def _check_scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.size != y.size:
        raise DimensionError(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise DimensionError("empty input")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties at 1/2."""
    s, y = _check_scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = _average_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels, positive_class: int = 1) -> float:
    """Non-interpolated average precision over a descending-score sweep.

    ``positive_class=0`` ranks by negated score, so low confidence comes
    first, and treats label 0 as the positive class. Ties are broken by
    input order (stable sort).
    """
    s, y = _check_scores_labels(scores, labels)
    if positive_class not in (0, 1):
        raise ValueError("positive_class must be 0 or 1")
    if positive_class == 0:
        s = -s
        y = 1 - y
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive sample")
    order = np.argsort(-s, kind="mergesort")
    rel = y[order]
    hits = np.cumsum(rel)
    ranks = np.arange(1, y.size + 1)
    precision = hits / ranks
    return float(precision[rel == 1].sum() / n_pos)


def fpr_at_95_tpr(scores, labels) -> float:
    """False positive rate at the tightest threshold keeping TPR at 95%.

    Thresholds admit samples with score >= t. Among thresholds whose true
    positive rate reaches 0.95, the largest one (fewest admitted samples)
    is used, which gives the smallest achievable false positive rate.
    """
    s, y = _check_scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("FPR at 95% TPR needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # candidate cut points: the last index of each tied block
    last_of_block = np.nonzero(np.diff(s_sorted) != 0.0)[0]
    cuts = np.concatenate([last_of_block, [s.size - 1]])
    tpr = tp[cuts] / n_pos
    fpr = fp[cuts] / n_neg
    ok = tpr >= 0.95
    return float(fpr[ok][0])


def ause(confidences, per_sample_errors, error_aggregate: str) -> float:
    """Area between the model's sparsification curve and the oracle curve.

    For each k from 0 to n-1 the k least-confident samples are removed and
    the remaining error is aggregated ("rmse": sqrt of the mean, for inputs
    that are squared errors; "absrel": plain mean). The oracle removes by
    descending true error instead. Both curves are normalized by their
    shared k=0 value; the result is the mean gap over k. If the full-set
    error is zero the area is defined as 0.
    """
    c = np.asarray(confidences, dtype=np.float64).ravel()
    e = np.asarray(per_sample_errors, dtype=np.float64).ravel()
    if c.size != e.size:
        raise DimensionError(f"{c.size} confidences vs {e.size} errors")
    if c.size < 2:
        raise DimensionError("sparsification needs at least two samples")
    if np.any(e < 0):
        raise ValueError("per-sample errors must be nonnegative")
    if error_aggregate not in ("rmse", "absrel"):
        raise ConfigError(f"unknown error aggregate {error_aggregate!r}")

    n = c.size
    # model curve: drop the k least-confident, keep the rest
    keep_order = np.argsort(c, kind="mergesort")
    model_tail = np.cumsum(e[keep_order][::-1])[::-1]  # sum of retained errors
    model_mean = model_tail / (n - np.arange(n))
    # oracle curve: drop the k largest errors, keep the n-k smallest
    e_sorted = np.sort(e)
    oracle_prefix = np.cumsum(e_sorted)
    oracle_mean = oracle_prefix[::-1] / (n - np.arange(n))

    if error_aggregate == "rmse":
        model_curve = np.sqrt(model_mean)
        oracle_curve = np.sqrt(oracle_mean)
    else:
        model_curve = model_mean
        oracle_curve = oracle_mean

    base = model_curve[0]
    if base == 0.0:
        return 0.0
    return float(np.mean(model_curve / base - oracle_curve / base))


@dataclass
class MetricReport:
    """All evaluation metrics for one model on one test set.

    Metrics that are undefined for the inputs (single-class labels, or
    sparsification in classification mode) are None, never a silent zero.
    """

    auroc: float | None
    aupr_error: float | None
    aupr_success: float | None
    fpr_at_95_tpr: float | None
    ause_rmse: float | None
    ause_absrel: float | None
    n_samples: int
    positive_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(params: np.ndarray, arch: model.Architecture, dataset) -> MetricReport:
    """Score a dataset with the estimator and compute the full metric suite."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    scores = model.forward(params, arch, dataset.inputs)
    labels = dataset.correctness()

    def safe(fn, *args):
        try:
            return fn(*args)
        except UndefinedMetricError:
            return None

    report = MetricReport(
        auroc=safe(auroc, scores, labels),
        aupr_error=safe(aupr, scores, labels, 0),
        aupr_success=safe(aupr, scores, labels, 1),
        fpr_at_95_tpr=safe(fpr_at_95_tpr, scores, labels),
        ause_rmse=None,
        ause_absrel=None,
        n_samples=int(len(dataset)),
        positive_rate=float(labels.mean()),
    )
    if dataset.mode == "regression" and len(dataset) >= 2:
        diff = dataset.task_pred - dataset.ground_truth
        sq_err = diff * diff
        gt = np.abs(dataset.ground_truth)
        absrel = np.where(gt > 0, np.abs(diff) / np.where(gt > 0, gt, 1.0), np.inf)
        report.ause_rmse = ause(scores, sq_err, "rmse")
        report.ause_absrel = ause(scores, absrel, "absrel")
    return report
