"""Losses, two-rate optimizer, training loop and frozen inference.

Protocols: ``pai`` trains on raw masked inputs with a learnable feature
prompt; ``locf``, ``zero`` and ``mean`` impute first and train a plain model.
"""

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .data import CLASSIFICATION, NormStats, dataset_hash
from .errors import DivergedRunError, InvalidInputError, StateError
from .imputation import impute_constant, impute_locf, observed_means
from .models import ArchConfig, backbone_forward, count_parameters, head_logits, init_model, \
    load_params, save_params
from .prompt import FeaturePrompt, fill_prompt, init_prompt

log = logging.getLogger(__name__)

PROTOCOLS = ("pai", "locf", "zero", "mean")


# -- losses ----------------------------------------------------------------

def _targets(y):
    y = np.asarray(y.data if isinstance(y, ad.Tensor) else y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("empty batch")
    return y


def loss_classification(y, y_hat=None, logits=None):
    """Mean binary cross-entropy.

    Pass ``logits`` (the training path, overflow-free) or probabilities
    ``y_hat``; both give the same value.
    """
    y = _targets(y)
    if logits is not None:
        z = ad.as_tensor(logits)
        if z.data.size != y.size:
            raise ValueError("labels and logits differ in length")
        # -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
        return ad.mean(ad.softplus(z) - z * y)
    p = ad.as_tensor(y_hat)
    if p.data.size != y.size:
        raise ValueError("labels and predictions differ in length")
    if ((p.data <= 0) | (p.data >= 1)).any():
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    terms = ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)
    return ad.mean(terms) * -1.0


def loss_regression(y, y_hat):
    y = _targets(y)
    p = ad.as_tensor(y_hat)
    if p.data.size != y.size:
        raise ValueError("labels and predictions differ in length")
    diff = p - y
    return ad.mean(diff * diff)


# -- optimizer -------------------------------------------------------------

@dataclass
class ParamGroup:
    name: str
    params: list
    lr: float
    frozen: bool = False
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class AsyncOptimizer:
    """Adam (or plain gradient steps) with an independent rate per group."""

    def __init__(self, groups, kind="adam", beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        seen = set()
        for g in groups:
            for p in g.params:
                if id(p) in seen:
                    raise ValueError("a tensor belongs to more than one group")
                seen.add(id(p))
        self.groups = list(groups)
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self):
        for g in self.groups:
            if g.frozen:
                continue
            missing = [i for i, p in enumerate(g.params) if p.grad is None]
            if missing:
                raise StateError(f"group {g.name!r}: {len(missing)} parameters have no gradient")
        for g in self.groups:
            if not g.frozen:
                self._update(g)
        self.zero_grad()

    def _update(self, g):
        if self.kind == "sgd":
            for p in g.params:
                p.data -= g.lr * p.grad
            return
        if not g.m:
            g.m = [np.zeros_like(p.data) for p in g.params]
            g.v = [np.zeros_like(p.data) for p in g.params]
        g.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** g.step
        c2 = 1.0 - b2 ** g.step
        for p, m, v in zip(g.params, g.m, g.v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data -= g.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for g in self.groups:
            for p in g.params:
                p.grad = None


def build_groups(params, prompt, lr_model, lr_prompt):
    groups = [ParamGroup("model", list(params.values()), lr_model)]
    if prompt is not None:
        groups.append(ParamGroup("prompt", [prompt.v], lr_prompt, frozen=prompt.frozen))
    return groups


# -- inputs ----------------------------------------------------------------

def dense_inputs(ds, protocol, fill=None):
    """Per-record dense matrices plus masks the model will consume.

    For ``pai`` the values keep 0 at missing positions and the mask drives
    the prompt fill; baselines return imputed values with an all-ones mask.
    """
    xs, ms = [], []
    for r in ds.records:
        if protocol == "pai":
            xs.append(r.observed())
            ms.append(r.mask)
            continue
        if protocol == "locf":
            imp = impute_locf(r)
        elif protocol == "zero":
            imp = impute_constant(r, np.zeros(ds.feature_count))
        elif protocol == "mean":
            imp = impute_constant(r, fill)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        xs.append(imp.values)
        ms.append(np.ones_like(r.mask))
    return xs, ms


def pad_batch(xs, ms, idx):
    """Stack selected records into ``(K, Lmax, N)``; padded rows count as observed."""
    lengths = np.array([xs[i].shape[0] for i in idx], dtype=int)
    K, L, N = len(idx), int(lengths.max()), xs[idx[0]].shape[1]
    X = np.zeros((K, L, N))
    M = np.ones((K, L, N), dtype=np.int8)
    for k, i in enumerate(idx):
        X[k, :lengths[k]] = xs[i]
        M[k, :lengths[k]] = ms[i]
    return X, M, lengths


def forward_logits(arch, params, prompt, X, M, lengths):
    x = ad.as_tensor(X)
    if prompt is not None:
        x = fill_prompt(x, M, prompt)
    return head_logits(arch, params, backbone_forward(arch, params, x, lengths))


def batch_loss(arch, logits, y):
    if arch.head == "linear-classifier":
        return loss_classification(y, logits=logits)
    return loss_regression(y, logits)


# -- training --------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr_model: float = 1e-2
    lr_prompt: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    protocol: str = "pai"
    optimizer: str = "adam"
    prompt_init: str = "zeros"
    selection_metric: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_model <= 0 or self.lr_prompt <= 0:
            raise ValueError("learning rates must be positive")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.selection_metric not in ("auto", "auprc", "auroc", "mse", "loss"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainedRun:
    arch: ArchConfig
    config: TrainConfig
    params: dict
    prompt: FeaturePrompt = None
    fill: np.ndarray = None
    history: list = field(default_factory=list)
    best_epoch: int = 0
    manifest: dict = field(default_factory=dict)


def _selection(cfg, arch, val_labels):
    metric = cfg.selection_metric
    if metric == "auto":
        metric = "auprc" if arch.head == "linear-classifier" else "mse"
    positives = int((val_labels == 1).sum())
    if metric == "auprc" and positives == 0 or metric == "auroc" and positives in (0, len(val_labels)):
        log.warning("validation split cannot score %s; selecting on validation loss", metric)
        metric = "loss"
    return metric, metric in ("auprc", "auroc")


def _validation_score(metric, arch, params, prompt, xs, ms, labels):
    logits = _logits_all(arch, params, prompt, xs, ms)
    if metric in ("loss", "mse"):
        with ad.no_grad():
            return batch_loss(arch, ad.as_tensor(logits), labels).item()
    scores = 1.0 / (1.0 + np.exp(-logits))
    return metrics.auprc(labels, scores) if metric == "auprc" else metrics.auroc(labels, scores)


def _logits_all(arch, params, prompt, xs, ms, chunk=256):
    out = []
    with ad.no_grad():
        for start in range(0, len(xs), chunk):
            idx = list(range(start, min(start + chunk, len(xs))))
            X, M, lengths = pad_batch(xs, ms, idx)
            out.append(np.array(forward_logits(arch, params, prompt, X, M, lengths).data).reshape(-1))
    return np.concatenate(out) if out else np.zeros(0)


def train(train_ds, val_ds, arch, cfg):
    """Fit one model; keep the checkpoint with the best validation score."""
    if arch.input_dim != train_ds.feature_count:
        raise InvalidInputError("architecture input_dim differs from the dataset feature count")
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    params = init_model(arch, seed=cfg.seed)
    fill = None
    prompt = None
    if cfg.protocol == "pai":
        stats = None
        if cfg.prompt_init == "feature-means":
            stats = NormStats(observed_means(train_ds), np.ones(train_ds.feature_count))
        prompt = init_prompt(cfg.prompt_init, train_ds.feature_count, stats, seed=cfg.seed + 1)
    elif cfg.protocol == "mean":
        fill = observed_means(train_ds)

    opt = AsyncOptimizer(build_groups(params, prompt, cfg.lr_model, cfg.lr_prompt),
                         kind=cfg.optimizer, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    xs, ms = dense_inputs(train_ds, cfg.protocol, fill)
    ys = train_ds.labels
    vxs, vms = dense_inputs(val_ds, cfg.protocol, fill)
    vys = val_ds.labels
    if len(vxs) == 0:
        raise ValueError("empty validation set")
    metric, higher_better = _selection(cfg, arch, vys)
    shuffle = np.random.default_rng([cfg.seed, 1])

    history = []
    best = None
    n = len(xs)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            X, M, lengths = pad_batch(xs, ms, idx)
            loss = batch_loss(arch, forward_logits(arch, params, prompt, X, M, lengths), ys[idx])
            value = loss.item()
            if not np.isfinite(value):
                ad.get_tape().reset()
                raise DivergedRunError(epoch, b, value)
            ad.backward(loss)
            opt.step()
            total += value * len(idx)
        train_loss = total / n
        score = _validation_score(metric, arch, params, prompt, vxs, vms, vys)
        better = best is None or (score > best[0] if higher_better else score < best[0])
        history.append({"epoch": epoch, "train_loss": train_loss, "val_metric": score})
        if better:
            best = (score, epoch, {k: p.data.copy() for k, p in params.items()},
                    None if prompt is None else prompt.values())

    _, best_epoch, best_params, best_prompt = best
    final_params = {k: ad.Tensor(v, requires_grad=True) for k, v in best_params.items()}
    final_prompt = None
    if prompt is not None:
        final_prompt = FeaturePrompt(best_prompt, prompt.init_strategy, prompt.seed)
    manifest = {
        "arch": arch.to_dict(),
        "train_config": cfg.to_dict(),
        "selection_metric": metric,
        "best_epoch": best_epoch,
        "train_hash": dataset_hash(train_ds),
        "val_hash": dataset_hash(val_ds),
        "parameter_counts": count_parameters(final_params, final_prompt),
        "wall_time_s": time.perf_counter() - t0,
    }
    return TrainedRun(arch, cfg, final_params, final_prompt, fill, history, best_epoch, manifest)


def predict(run, ds):
    """Scores per record with the prompt frozen; never mutates the run."""
    if ds.feature_count != run.arch.input_dim and len(ds):
        raise InvalidInputError(f"dataset has {ds.feature_count} features, model expects {run.arch.input_dim}")
    if len(ds) == 0:
        return np.zeros(0)
    if run.prompt is not None and not run.prompt.frozen:
        run.prompt.freeze()
    xs, ms = dense_inputs(ds, run.config.protocol, run.fill)
    logits = _logits_all(run.arch, run.params, run.prompt, xs, ms)
    if run.arch.head == "linear-classifier":
        e = np.exp(-np.abs(logits))
        return np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return logits


def evaluate(run, ds, task=CLASSIFICATION):
    scores = predict(run, ds)
    y = ds.labels
    if task == CLASSIFICATION:
        return {"auroc": metrics.auroc(y, scores), "auprc": metrics.auprc(y, scores),
                "min_pse": metrics.min_pse(y, scores)}
    return metrics.regression_metrics(y, scores).to_dict()


def checkpoint_hash(run):
    h = hashlib.sha256()
    for name in sorted(run.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(run.params[name].data, dtype="<f8").tobytes())
    if run.prompt is not None:
        h.update(np.ascontiguousarray(run.prompt.v.data, dtype="<f8").tobytes())
    return h.hexdigest()


# -- persistence -----------------------------------------------------------

def save_run(run, directory, extra=None):
    """Write ``manifest.json``, ``history.csv`` and ``checkpoint/``."""
    ckpt = os.path.join(directory, "checkpoint")
    os.makedirs(ckpt, exist_ok=True)
    save_params(run.params, run.arch, ckpt, seed=run.config.seed)
    if run.prompt is not None:
        run.prompt.save(os.path.join(ckpt, "prompt.json"))
    manifest = dict(run.manifest)
    manifest["fill"] = None if run.fill is None else np.asarray(run.fill).tolist()
    if extra:
        manifest.update(extra)
    _write_json(os.path.join(directory, "manifest.json"), manifest)
    tmp = os.path.join(directory, "history.csv.tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_metric"])
        for row in run.history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_metric"])])
    os.replace(tmp, os.path.join(directory, "history.csv"))


def load_run(directory):
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    arch, params, _ = load_params(os.path.join(directory, "checkpoint"))
    cfg = TrainConfig(**manifest["train_config"])
    prompt_path = os.path.join(directory, "checkpoint", "prompt.json")
    prompt = FeaturePrompt.load(prompt_path) if os.path.exists(prompt_path) else None
    fill = None if manifest.get("fill") is None else np.array(manifest["fill"])
    history = []
    with open(os.path.join(directory, "history.csv"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            history.append({"epoch": int(row["epoch"]), "train_loss": float(row["train_loss"]),
                            "val_metric": float(row["val_metric"])})
    return TrainedRun(arch, cfg, params, prompt, fill, history, manifest.get("best_epoch", 0), manifest)


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
