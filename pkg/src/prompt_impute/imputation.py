"""Impute-then-regress baselines: LOCF and constant fill."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class ImputedRecord:
    values: np.ndarray
    mask: np.ndarray
    label: float
    id: str = ""

    @property
    def length(self):
        return self.values.shape[0]


def impute_locf(rec):
    """Carry each feature's last observation forward in time.

    Entries before a feature's first observation get 0, the feature mean
    after z-scoring.
    """
    mask = rec.mask == 1
    L = mask.shape[0]
    # index of the latest observed row at or before each step, -1 if none
    idx = np.where(mask, np.arange(L)[:, None], -1)
    np.maximum.accumulate(idx, axis=0, out=idx)
    obs = rec.observed()
    filled = np.take_along_axis(obs, np.maximum(idx, 0), axis=0)
    values = np.where(idx >= 0, filled, 0.0)
    values = np.where(mask, obs, values)
    return ImputedRecord(values, rec.mask, rec.label, rec.id)


def impute_constant(rec, fill):
    fill = np.asarray(fill, dtype=np.float64)
    if fill.shape != (rec.feature_count,):
        raise ValueError(f"fill has shape {fill.shape}, expected ({rec.feature_count},)")
    values = np.where(rec.mask == 1, rec.observed(), fill)
    return ImputedRecord(values, rec.mask, rec.label, rec.id)


def impute_zero(rec):
    return impute_constant(rec, np.zeros(rec.feature_count))


def observed_means(ds):
    """Per-feature mean of observed entries (the mean-fill constants)."""
    total = np.zeros(ds.feature_count)
    count = np.zeros(ds.feature_count)
    for r in ds.records:
        total += r.observed().sum(axis=0)
        count += r.mask.sum(axis=0)
    return np.divide(total, count, out=np.zeros(ds.feature_count), where=count > 0)
