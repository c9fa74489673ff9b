"""Binary-classification and regression metrics."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


@dataclass
class ClassificationEval:
    auroc: float
    auprc: float
    min_pse: float

    def to_dict(self):
        return asdict(self)


@dataclass
class RegressionEval:
    mse: float
    rmse: float
    mae: float

    def to_dict(self):
        return asdict(self)


def _check(labels, scores):
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    return y, s


def auroc(labels, scores):
    """Mann-Whitney concordance with ties counted as one half."""
    y, s = _check(labels, scores)
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def _threshold_counts(y, s):
    """True/false positive counts at each distinct score, descending."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp


def auprc(labels, scores):
    """Average precision; tied scores form a single threshold."""
    y, s = _check(labels, scores)
    pos = y.sum()
    if pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    tp, fp = _threshold_counts(y, s)
    precision = tp / (tp + fp)
    recall = tp / pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def min_pse(labels, scores):
    """Best min(precision, sensitivity) over thresholds ``score >= t``."""
    y, s = _check(labels, scores)
    pos = y.sum()
    if pos == 0:
        raise UndefinedMetricError("min(P+, Se) needs at least one positive")
    tp, fp = _threshold_counts(y, s)
    return float(np.max(np.minimum(tp / (tp + fp), tp / pos)))


def classification_metrics(labels, scores):
    return ClassificationEval(auroc(labels, scores), auprc(labels, scores), min_pse(labels, scores))


def regression_metrics(y, y_hat):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != p.shape:
        raise ValueError("targets and predictions differ in length")
    if y.size == 0:
        raise ValueError("empty input")
    err = y - p
    mse = float(np.mean(err * err))
    return RegressionEval(mse, float(np.sqrt(mse)), float(np.mean(np.abs(err))))
