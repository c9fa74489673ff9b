"""Protocol comparisons and robustness sweeps with reproducible reports.

One job is a (backbone, protocol, seed, sweep value) cell. Every job rebuilds
its data pipeline from the config, so splits, injected masks and subsamples
are a pure function of (config, seed, sweep value) and identical across
protocols; the per-job hashes recorded in each row let that be checked.
"""

import copy
import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import __version__
from .data import CLASSIFICATION, GenConfig, apply_normalization, compute_norm_stats, \
    dataset_hash, inject_missing, load_dataset, split_stratified, subsample, synthesize
from .errors import DivergedRunError, UndefinedMetricError
from .models import ArchConfig, head_for_task
from .training import PROTOCOLS, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

SWEEP_KINDS = ("missing", "samples", "lr", "layers")
CLASSIFICATION_METRICS = ("auroc", "auprc", "min_pse")
REGRESSION_METRICS = ("mse", "rmse", "mae")
FORMATS = ("json", "csv", "figure-data")


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"synthetic": {}})
    task: str = CLASSIFICATION
    backbones: list = field(default_factory=lambda: ["gru"])
    protocols: list = field(default_factory=lambda: ["pai", "zero", "locf"])
    train: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    sweep: dict = None
    seeds: list = field(default_factory=lambda: [0])
    ratios: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    out: str = None

    def __post_init__(self):
        if not self.backbones or not self.protocols or not self.seeds:
            raise ValueError("backbones, protocols and seeds must be nonempty")
        bad = [p for p in self.protocols if p not in PROTOCOLS]
        if bad:
            raise ValueError(f"unknown protocols {bad}")
        for b in self.backbones:
            ArchConfig(backbone=b)
        if not isinstance(self.dataset, dict) or not (
                "synthetic" in self.dataset or {"data_path", "labels_path"} <= set(self.dataset)):
            raise ValueError("dataset needs 'synthetic' or 'data_path' + 'labels_path'")
        if "synthetic" in self.dataset:
            gen = GenConfig(**self.dataset["synthetic"])
            if gen.task != self.task:
                raise ValueError("synthetic task differs from experiment task")
        TrainConfig(**self.train)
        if self.sweep is not None:
            _validate_sweep(self.sweep, self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        d = self.to_dict()
        d.pop("out", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _validate_sweep(sweep, cfg):
    kind = sweep.get("kind")
    values = sweep.get("values")
    if kind not in SWEEP_KINDS:
        raise ValueError(f"sweep kind must be one of {SWEEP_KINDS}")
    if not values:
        raise ValueError("sweep needs a nonempty values list")
    if kind == "missing":
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("missing-rate grid must be increasing")
        if any(not 0 <= v < 1 for v in values):
            raise ValueError("missing rates must lie in [0, 1)")
        if "synthetic" in cfg.dataset:
            base = GenConfig(**cfg.dataset["synthetic"]).missing_rate
            if values[0] < base - 1e-9:
                raise ValueError(f"missing-rate grid starts below the base rate {base}")
    elif kind == "samples":
        if any(not 0 < v <= 1 for v in values):
            raise ValueError("sample fractions must lie in (0, 1]")
    elif kind == "lr":
        if any(v <= 0 for v in values):
            raise ValueError("learning rates must be positive")
    elif kind == "layers":
        if any(int(v) != v or not 1 <= v <= 3 for v in values):
            raise ValueError("layer counts must be integers in 1..3")


# -- data pipeline ---------------------------------------------------------

@lru_cache(maxsize=4)
def _base_dataset(dataset_json, task):
    source = json.loads(dataset_json)
    if "synthetic" in source:
        return synthesize(GenConfig(**source["synthetic"]))
    return load_dataset(source["data_path"], source["labels_path"], task=task)


def base_dataset(cfg):
    return _base_dataset(json.dumps(cfg.dataset, sort_keys=True), cfg.task)


def prepare_splits(cfg, seed, sweep_value=None):
    """Base data -> (inject) -> split -> (subsample) -> normalize with train stats."""
    ds = base_dataset(cfg)
    kind = cfg.sweep["kind"] if cfg.sweep else None
    if kind == "missing":
        if sweep_value > ds.missing_rate() + 1e-12:
            ds = inject_missing(ds, sweep_value, seed=seed)
    tr, va, te = split_stratified(ds, tuple(cfg.ratios), seed=seed)
    if kind == "samples":
        tr = subsample(tr, sweep_value, seed=seed)
    stats = compute_norm_stats(tr)
    tr, va, te = (apply_normalization(d, stats) for d in (tr, va, te))
    hashes = {"train": dataset_hash(tr), "val": dataset_hash(va), "test": dataset_hash(te)}
    return tr, va, te, stats, hashes


_SPLIT_CACHE = {}


def _cached_splits(cfg, seed, sweep_value):
    key = (cfg.config_hash(), seed, sweep_value)
    if key not in _SPLIT_CACHE:
        _SPLIT_CACHE.clear()
        _SPLIT_CACHE[key] = prepare_splits(cfg, seed, sweep_value)
    return _SPLIT_CACHE[key]


def job_settings(cfg, backbone, protocol, seed, sweep_value):
    """Architecture and training config for one grid cell."""
    arch_kw = {"hidden_dim": 32, "layers": 1}
    arch_kw.update(cfg.arch)
    train_kw = dict(cfg.train)
    train_kw.update(protocol=protocol, seed=seed)
    kind = cfg.sweep["kind"] if cfg.sweep else None
    if kind == "layers" and protocol != "pai":
        arch_kw["layers"] = int(sweep_value)
    if kind == "layers" and protocol == "pai":
        arch_kw["layers"] = 1
    if kind == "lr" and protocol == "pai":
        train_kw["lr_prompt"] = float(sweep_value)
    return arch_kw, TrainConfig(**train_kw)


def run_job(cfg_dict, backbone, protocol, seed, sweep_value):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    row = {"backbone": backbone, "protocol": protocol, "seed": seed, "sweep_value": sweep_value,
           "status": "ok", "error": None}
    t0 = time.perf_counter()
    try:
        tr, va, te, _, hashes = _cached_splits(cfg, seed, sweep_value)
        row["data_hash"] = hashlib.sha256(
            "|".join(hashes[k] for k in ("train", "val", "test")).encode()).hexdigest()
        arch_kw, tcfg = job_settings(cfg, backbone, protocol, seed, sweep_value)
        arch = ArchConfig(backbone=backbone, input_dim=tr.feature_count,
                          head=head_for_task(cfg.task), **arch_kw)
        row.update(layers=arch.layers, lr_model=tcfg.lr_model, lr_prompt=tcfg.lr_prompt)
        run = train(tr, va, arch, tcfg)
        counts = run.manifest["parameter_counts"]
        row.update(model_params=counts["model_count"], prompt_params=counts["prompt_count"],
                   best_epoch=run.best_epoch, final_train_loss=run.history[-1]["train_loss"])
        row.update(evaluate(run, te, cfg.task))
    except (DivergedRunError, UndefinedMetricError, FloatingPointError, ValueError) as exc:
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["wall_time_s"] = time.perf_counter() - t0
    return row


def _grid(cfg):
    values = cfg.sweep["values"] if cfg.sweep else [None]
    return [(b, p, s, v) for v in values for s in cfg.seeds for b in cfg.backbones for p in cfg.protocols]


def run_sweep(cfg, workers=1):
    """Run every grid cell and assemble the report."""
    t0 = time.perf_counter()
    cells = _grid(cfg)
    cfg_dict = cfg.to_dict()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_job, cfg_dict, *c) for c in cells]
            rows = [f.result() for f in futures]
    else:
        rows = [run_job(cfg_dict, *c) for c in cells]
    return build_report(cfg, rows, time.perf_counter() - t0)


def run_compare_protocols(cfg, workers=1):
    if cfg.sweep is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "sweep": None})
    return run_sweep(cfg, workers)


# -- report ----------------------------------------------------------------

def metric_names(task):
    return CLASSIFICATION_METRICS if task == CLASSIFICATION else REGRESSION_METRICS


def aggregate(rows, task):
    cells = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        cells.setdefault((r["backbone"], r["protocol"], r["sweep_value"]), []).append(r)
    out = []
    for (b, p, v), group in cells.items():
        for m in metric_names(task):
            vals = np.array([g[m] for g in group])
            out.append({"backbone": b, "protocol": p, "sweep_value": v, "metric": m,
                        "median": float(np.median(vals)), "min": float(vals.min()),
                        "max": float(vals.max()), "n": int(vals.size)})
    return out


def fairness(rows):
    """Per (seed, sweep value): do all protocols and backbones see the same data?"""
    seen = {}
    for r in rows:
        if r.get("data_hash") is None:
            continue
        seen.setdefault(f"{r['seed']}|{r['sweep_value']}", set()).add(r["data_hash"])
    cells = {k: sorted(v) for k, v in sorted(seen.items())}
    return {"consistent": all(len(v) == 1 for v in cells.values()), "hashes": cells}


def lr_regimes(rows, task):
    """PAI results split by prompt rate below vs at-or-above the model rate."""
    key = "auprc" if task == CLASSIFICATION else "mse"
    out = {}
    for r in rows:
        if r["protocol"] != "pai" or r["status"] != "ok":
            continue
        regime = "prompt_lr_below_model" if r["lr_prompt"] < r["lr_model"] else "prompt_lr_at_or_above_model"
        out.setdefault(r["backbone"], {}).setdefault(regime, []).append(r[key])
    return {b: {g: {"metric": key, "median": float(np.median(v)), "n": len(v)} for g, v in sorted(d.items())}
            for b, d in sorted(out.items())}


def build_report(cfg, rows, wall_time):
    failed = sum(r["status"] != "ok" for r in rows)
    report = {
        "rows": rows,
        "aggregates": aggregate(rows, cfg.task),
        "fairness": fairness(rows),
        "manifest": {
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "library_version": __version__,
            "wall_time_s": wall_time,
            "row_count": len(rows),
            "failed_rows": failed,
            "prompt_parameters_total": int(sum(r.get("prompt_params", 0) or 0 for r in rows)),
        },
    }
    if cfg.sweep and cfg.sweep["kind"] == "lr":
        report["lr_regimes"] = lr_regimes(rows, cfg.task)
    return report


ROW_FIELDS = ("backbone", "protocol", "seed", "sweep_value", "status", "layers", "lr_model",
              "lr_prompt", "model_params", "prompt_params", "best_epoch", "data_hash", "error")


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if r.get(h) is None else r.get(h) for h in header])
    return buf.getvalue()


def emit_report(report, out_dir, formats):
    """Write the report in each requested format; returns {format: [paths]}."""
    formats = list(formats)
    if not formats:
        raise ValueError("at least one format is required")
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unknown formats {bad}")
    os.makedirs(out_dir, exist_ok=True)
    task = report["manifest"]["config"]["task"]
    written = {}
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        _atomic_write(path, json.dumps(report, sort_keys=True, indent=2) + "\n")
        written["json"] = [path]
    if "csv" in formats:
        path = os.path.join(out_dir, "report.csv")
        header = list(ROW_FIELDS[:5]) + list(metric_names(task)) + list(ROW_FIELDS[5:])
        _atomic_write(path, _csv_text(header, report["rows"]))
        written["csv"] = [path]
    if "figure-data" in formats:
        paths = []
        by_backbone = {}
        for a in report["aggregates"]:
            by_backbone.setdefault(a["backbone"], []).append(a)
        for b in sorted(by_backbone):
            rows = sorted(by_backbone[b], key=lambda a: (_sort_key(a["sweep_value"]), a["protocol"], a["metric"]))
            path = os.path.join(out_dir, f"figure_{b}.csv")
            _atomic_write(path, _csv_text(["sweep_value", "protocol", "metric", "median", "min", "max"], rows))
            paths.append(path)
        written["figure-data"] = paths
    return written


def _sort_key(v):
    return (0, 0.0) if v is None else (1, float(v))


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


TIMING_KEYS = ("wall_time_s",)


def without_timing(report):
    """Deep copy of a report minus wall-clock fields, for exact reruns comparison."""
    if isinstance(report, dict):
        return {k: without_timing(v) for k, v in report.items() if k not in TIMING_KEYS}
    if isinstance(report, list):
        return [without_timing(v) for v in report]
    return report
