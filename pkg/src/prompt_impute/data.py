"""Incomplete multivariate time series: records, I/O, synthesis and perturbation.

A record stores values ``X`` (L x N) and an observation mask ``M`` (1 observed,
0 missing). Masked positions hold a placeholder that must never be read:
``0.0`` normally, ``NaN`` when ``PROMPT_IMPUTE_DEBUG=1`` so leaks are loud.
"""

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import InvalidInputError, ParseError, StratificationError

log = logging.getLogger(__name__)

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)


def debug_enabled():
    return os.environ.get("PROMPT_IMPUTE_DEBUG", "") == "1"


def placeholder():
    return np.nan if debug_enabled() else 0.0


@dataclass(frozen=True, eq=False)
class TimeSeriesRecord:
    id: str
    values: np.ndarray
    mask: np.ndarray
    label: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=np.int8)
        if values.ndim != 2 or values.shape != mask.shape:
            raise InvalidInputError(f"record {self.id}: values {values.shape} vs mask {mask.shape}")
        if values.shape[0] < 1:
            raise InvalidInputError(f"record {self.id}: empty sequence")
        if not np.isin(mask, (0, 1)).all():
            raise InvalidInputError(f"record {self.id}: mask entries must be 0 or 1")
        observed = mask == 1
        if not np.isfinite(values[observed]).all():
            raise InvalidInputError(f"record {self.id}: non-finite observed value")
        values[~observed] = placeholder()
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "label", float(self.label))

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def feature_count(self):
        return self.values.shape[1]

    def observed(self):
        """Values with masked positions set to 0 (safe to read everywhere)."""
        return np.where(self.mask == 1, self.values, 0.0)

    def replace(self, values=None, mask=None):
        return TimeSeriesRecord(self.id,
                                self.values if values is None else values,
                                self.mask if mask is None else mask,
                                self.label)


@dataclass(frozen=True, eq=False)
class Dataset:
    records: tuple
    feature_count: int
    task: str = CLASSIFICATION
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for r in self.records:
            if r.feature_count != self.feature_count:
                raise InvalidInputError(
                    f"record {r.id} has {r.feature_count} features, expected {self.feature_count}")
            if self.task == CLASSIFICATION and r.label not in (0.0, 1.0):
                raise InvalidInputError(f"record {r.id}: classification label {r.label}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self):
        return np.array([r.label for r in self.records])

    def with_records(self, records, **provenance):
        prov = dict(self.provenance)
        prov.update(provenance)
        return Dataset(tuple(records), self.feature_count, self.task, prov)

    def missing_rate(self):
        total = sum(r.mask.size for r in self.records)
        if total == 0:
            return 0.0
        return 1.0 - sum(int(r.mask.sum()) for r in self.records) / total


def dataset_hash(ds):
    """SHA-256 over ids, observed values, masks and labels (placeholders excluded)."""
    h = hashlib.sha256()
    h.update(f"{ds.task}|{ds.feature_count}|{len(ds)}".encode())
    for r in ds.records:
        h.update(r.id.encode())
        h.update(np.int64(r.length).tobytes())
        h.update(np.ascontiguousarray(r.mask, dtype=np.int8).tobytes())
        h.update(np.ascontiguousarray(r.observed(), dtype="<f8").tobytes())
        h.update(np.float64(r.label).tobytes())
    return h.hexdigest()


# -- generator -------------------------------------------------------------

RANDOM = "random"
INFORMATIVE = "informative"
RATE_SPREAD = 0.08


@dataclass
class GenConfig:
    record_count: int = 1000
    feature_count: int = 8
    length_min: int = 10
    length_max: int = 30
    missing_rate: float = 0.4
    missingness: str = INFORMATIVE
    task: str = CLASSIFICATION
    label_noise: float = 0.5
    seed: int = 0
    positive_rate: float = 0.2
    latent_dim: int = 4
    informative_strength: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.length_min < 1 or self.length_max < self.length_min:
            raise ValueError("need 1 <= length_min <= length_max")
        if self.record_count < 0 or self.feature_count < 1:
            raise ValueError("record_count >= 0 and feature_count >= 1 required")
        if self.missingness not in (RANDOM, INFORMATIVE):
            raise ValueError(f"unknown missingness mode {self.missingness!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.label_noise < 0:
            raise ValueError("label_noise must be nonnegative")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


def _mask_for(x_true, k_missing, mode, strength, rng):
    """Choose exactly ``k_missing`` entries to hide."""
    mask = np.ones(x_true.shape, dtype=np.int8)
    if k_missing == 0:
        return mask
    size = x_true.size
    if mode == RANDOM:
        hidden = rng.choice(size, size=k_missing, replace=False)
    else:
        mag = np.abs(x_true).reshape(-1)
        z = (mag - mag.mean()) / (mag.std() + 1e-12)
        w = np.exp(strength * z)
        hidden = rng.choice(size, size=k_missing, replace=False, p=w / w.sum())
    mask.reshape(-1)[hidden] = 0
    return mask


def synthesize(config, seed=None):
    """Generate a dataset whose labels depend on the pre-masking values.

    Each record follows a latent AR(1) process around a record-level offset,
    projected to the features through a loading matrix shared by all records,
    on top of positive per-feature baselines (lab-value-like scale).
    ``label_noise`` is a logit temperature in standardized-score units: 0
    makes labels a deterministic threshold of the pooled signal.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    N, k = config.feature_count, config.latent_dim
    loading = rng.normal(0.0, 0.6 / math.sqrt(k), size=(k, N))
    baseline = rng.uniform(1.5, 3.0, size=N)
    weight = rng.uniform(0.5, 1.5, size=N)
    phi = 0.8

    lengths = rng.integers(config.length_min, config.length_max + 1, size=config.record_count)
    trajectories = []
    for L in lengths:
        offset = rng.normal(0.0, 1.0, size=k)
        z = np.empty((L, k))
        state = rng.normal(0.0, 1.0, size=k)
        for t in range(L):
            state = phi * state + math.sqrt(1 - phi * phi) * rng.normal(0.0, 1.0, size=k)
            z[t] = offset + state
        x = baseline + z @ loading + 0.1 * rng.normal(0.0, 1.0, size=(L, N))
        trajectories.append(x)

    pooled = np.array([x.mean(axis=0) for x in trajectories]).reshape(-1, N)
    score = pooled @ weight
    if score.size > 1 and score.std() > 0:
        score = (score - score.mean()) / score.std()
    else:
        score = np.zeros_like(score)

    if config.task == CLASSIFICATION:
        if config.label_noise == 0:
            cut = np.quantile(score, 1 - config.positive_rate) if score.size else 0.0
            labels = (score > cut).astype(float)
        else:
            temp = config.label_noise

            def excess(b):
                return expit(score / temp + b).mean() - config.positive_rate

            bias = brentq(excess, -50.0, 50.0) if score.size else 0.0
            labels = (rng.random(score.size) < expit(score / temp + bias)).astype(float)
    else:
        labels = np.clip(3.0 + score + config.label_noise * rng.normal(size=score.size), 0.0, None)

    # informative mode: records with larger values also lose more entries,
    # with the per-record rate kept within p +/- RATE_SPREAD
    rates = np.full(len(trajectories), config.missing_rate)
    if config.missingness == INFORMATIVE and len(trajectories) > 1:
        level = np.array([np.abs(x).mean() for x in trajectories])
        level = (level - level.mean()) / (level.std() + 1e-12)
        spread = min(RATE_SPREAD, config.missing_rate / 2, (1 - config.missing_rate) / 2)
        rates = config.missing_rate + spread * np.tanh(level)

    records = []
    for i, x in enumerate(trajectories):
        k_missing = int(round(rates[i] * x.size))
        mask = _mask_for(x, k_missing, config.missingness, config.informative_strength, rng)
        records.append(TimeSeriesRecord(f"r{i:05d}", np.where(mask == 1, x, 0.0), mask, labels[i]))
    prov = {"kind": "synthetic", "config": config.to_dict(), "seed": int(seed)}
    return Dataset(tuple(records), N, config.task, prov)


# -- files -----------------------------------------------------------------

def load_dataset(data_path, labels_path, task=CLASSIFICATION):
    """Read the long-format CSV pair into a Dataset.

    Data header is ``record_id,time_index,f1,...,fN``; an empty cell means
    missing. Labels are ``record_id,label``.
    """
    rows = {}
    feature_count = None
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None:
            if len(header) < 3 or header[0] != "record_id" or header[1] != "time_index":
                raise ParseError("header must start with record_id,time_index", line=1)
            feature_count = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != feature_count + 2:
                raise ParseError(f"expected {feature_count + 2} cells, got {len(row)}", line=lineno)
            rid = row[0]
            try:
                t = int(row[1])
                cells = [float(c) if c.strip() != "" else None for c in row[2:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if t < 0:
                raise ParseError("negative time_index", line=lineno)
            steps = rows.setdefault(rid, {})
            if t in steps:
                raise InvalidInputError(f"duplicate (record_id, time_index) = ({rid}, {t})")
            steps[t] = cells

    labels = {}
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None and header[:2] != ["record_id", "label"]:
            raise ParseError("labels header must be record_id,label", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError("expected record_id,label", line=lineno)
            try:
                labels[row[0]] = float(row[1])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None

    unknown = sorted(set(labels) - set(rows))
    if unknown:
        raise InvalidInputError(f"labels reference unknown ids: {unknown[:5]}")
    records = []
    for rid, steps in rows.items():
        if rid not in labels:
            raise InvalidInputError(f"record {rid} has no label")
        L = max(steps) + 1
        if len(steps) != L:
            raise InvalidInputError(f"record {rid}: time_index not contiguous from 0")
        values = np.zeros((L, feature_count))
        mask = np.zeros((L, feature_count), dtype=np.int8)
        for t, cells in steps.items():
            for n, c in enumerate(cells):
                if c is not None:
                    values[t, n] = c
                    mask[t, n] = 1
        records.append(TimeSeriesRecord(rid, values, mask, labels[rid]))
    prov = {"kind": "file", "data_path": str(data_path), "labels_path": str(labels_path)}
    return Dataset(tuple(records), feature_count or 0, task, prov)


def write_csv(ds, data_path, labels_path):
    """Inverse of :func:`load_dataset`; floats written with ``repr`` so they round-trip."""
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "time_index"] + [f"f{n + 1}" for n in range(ds.feature_count)])
        for r in ds.records:
            obs = r.observed()
            for t in range(r.length):
                w.writerow([r.id, t] + [repr(float(obs[t, n])) if r.mask[t, n] else ""
                                        for n in range(ds.feature_count)])
    with open(labels_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "label"])
        for r in ds.records:
            w.writerow([r.id, repr(r.label)])


def dataset_to_dict(ds):
    return {
        "task": ds.task,
        "feature_count": ds.feature_count,
        "provenance": ds.provenance,
        "records": [
            {"id": r.id, "label": r.label, "values": r.observed().tolist(), "mask": r.mask.tolist()}
            for r in ds.records
        ],
    }


def dataset_from_dict(doc):
    records = [TimeSeriesRecord(d["id"], np.array(d["values"], dtype=float).reshape(len(d["mask"]), -1),
                                np.array(d["mask"]).reshape(len(d["mask"]), -1), d["label"])
               for d in doc["records"]]
    return Dataset(tuple(records), int(doc["feature_count"]), doc["task"], doc.get("provenance", {}))


def save_dataset(ds, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(dataset_to_dict(ds), fh, sort_keys=True)
    os.replace(tmp, path)


def read_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return dataset_from_dict(json.load(fh))


# -- normalization ---------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


def compute_norm_stats(train):
    N = train.feature_count
    total = np.zeros(N)
    count = np.zeros(N)
    for r in train.records:
        total += r.observed().sum(axis=0)
        count += r.mask.sum(axis=0)
    mean = np.divide(total, count, out=np.zeros(N), where=count > 0)
    sq = np.zeros(N)
    for r in train.records:
        sq += (np.where(r.mask == 1, r.observed() - mean, 0.0) ** 2).sum(axis=0)
    var = np.divide(sq, count, out=np.zeros(N), where=count > 0)
    std = np.sqrt(var)
    bad = ~(std > 0)
    if bad.any():
        log.warning("features %s have zero spread or no observations; using std=1",
                    np.flatnonzero(bad).tolist())
        std[bad] = 1.0
    return NormStats(mean, std)


def apply_normalization(ds, stats):
    out = []
    for r in ds.records:
        z = (r.observed() - stats.mean) / stats.std
        out.append(r.replace(values=np.where(r.mask == 1, z, 0.0)))
    return ds.with_records(out, normalized=True)


# -- splitting and perturbation --------------------------------------------

def _strata(ds):
    y = ds.labels
    if ds.task == CLASSIFICATION:
        return y.astype(int)
    if len(y) == 0:
        return y.astype(int)
    edges = np.quantile(y, [0.25, 0.5, 0.75])
    return np.searchsorted(edges, y, side="right")


def split_stratified(ds, ratios=(0.7, 0.1, 0.2), seed=0):
    """Partition into train/val/test with per-stratum proportions."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    strata = _strata(ds)
    if ds.task == CLASSIFICATION and len(set(strata.tolist())) < 2:
        raise StratificationError("classification split needs both classes present")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        if idx.size < 3:
            raise StratificationError(f"stratum {s} has only {idx.size} records")
        idx = rng.permutation(idx)
        n_train = int(round(ratios[0] * idx.size))
        n_val = int(round(ratios[1] * idx.size))
        n_val = min(n_val, idx.size - n_train)
        parts[0].extend(idx[:n_train].tolist())
        parts[1].extend(idx[n_train:n_train + n_val].tolist())
        parts[2].extend(idx[n_train + n_val:].tolist())
    names = ("train", "val", "test")
    return tuple(ds.with_records([ds.records[i] for i in sorted(p)], split=name, split_seed=int(seed))
                 for name, p in zip(names, parts))


def inject_missing(ds, target_rate, seed=0):
    """Hide uniformly chosen observed entries until the global missing rate hits ``target_rate``."""
    if not 0.0 <= target_rate < 1.0:
        raise ValueError("target_rate must lie in [0, 1)")
    total = sum(r.mask.size for r in ds.records)
    missing = total - sum(int(r.mask.sum()) for r in ds.records)
    want = int(math.ceil(target_rate * total - 1e-9))
    if want < missing:
        raise ValueError(f"target rate {target_rate} is below the current rate {missing / max(total, 1):.4f}")
    flips = want - missing
    if flips == 0:
        return ds
    # canonical order: record order, then row-major within each record
    owners, offsets = [], []
    for i, r in enumerate(ds.records):
        obs = np.flatnonzero(r.mask.reshape(-1) == 1)
        owners.append(np.full(obs.size, i))
        offsets.append(obs)
    owners = np.concatenate(owners)
    offsets = np.concatenate(offsets)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(owners.size, size=flips, replace=False)
    masks = [r.mask.copy() for r in ds.records]
    for c in chosen:
        masks[owners[c]].reshape(-1)[offsets[c]] = 0
    out = [r.replace(values=np.where(m == 1, r.observed(), 0.0), mask=m) for r, m in zip(ds.records, masks)]
    return ds.with_records(out, injected_rate=float(target_rate), inject_seed=int(seed))


def subsample(train, fraction, seed=0):
    """Stratified subset holding ``fraction`` of each stratum."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return train
    strata = _strata(train)
    rng = np.random.default_rng(seed)
    keep = []
    for s in np.unique(strata):
        idx = rng.permutation(np.flatnonzero(strata == s))
        n = int(round(fraction * idx.size))
        if n == 0:
            raise StratificationError(f"fraction {fraction} leaves stratum {s} empty")
        keep.extend(idx[:n].tolist())
    return train.with_records([train.records[i] for i in sorted(keep)],
                              subsample=float(fraction), subsample_seed=int(seed))
