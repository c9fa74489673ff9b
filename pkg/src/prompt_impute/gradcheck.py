"""Finite-difference verification of full backbone + head + loss gradients."""

import itertools
import time

import numpy as np

from . import autodiff as ad
from .models import BACKBONES, HEADS, ArchConfig, init_model
from .prompt import FeaturePrompt
from .training import batch_loss, forward_logits

KINK_CLEARANCE = 1e-3


def random_instance(backbone, head, protocol, rng, max_len=5, max_features=3, max_hidden=6, max_batch=4):
    """Small random problem: (arch, params, prompt or None, X, M, lengths, y)."""
    N = int(rng.integers(1, max_features + 1))
    d = int(rng.integers(1, max_hidden + 1))
    K = int(rng.integers(1, max_batch + 1))
    layers = int(rng.integers(1, 3))
    arch = ArchConfig(backbone=backbone, input_dim=N, hidden_dim=d, layers=layers, head=head)
    params = init_model(arch, seed=int(rng.integers(2**31)))
    for p in params.values():
        if p.ndim == 1:
            p.data += rng.normal(0.0, 0.5, size=p.shape)
    lengths = rng.integers(1, max_len + 1, size=K)
    L = int(lengths.max())
    X = rng.normal(size=(K, L, N))
    M = (rng.random((K, L, N)) > 0.4).astype(np.int8)
    for k in range(K):
        X[k, lengths[k]:] = 0.0
        M[k, lengths[k]:] = 1
    X = np.where(M == 1, X, 0.0)
    if head == "linear-classifier":
        y = rng.integers(0, 2, size=K).astype(float)
    else:
        y = rng.normal(size=K)
    prompt = FeaturePrompt(rng.normal(0.0, 0.5, size=N)) if protocol == "pai" else None
    return arch, params, prompt, X, M, lengths, y


def check_instance(arch, params, prompt, X, M, lengths, y, eps=1e-4):
    """Largest relative error between analytic and central-difference gradients.

    Returns None when a relu input lies too close to its kink for a finite
    difference to be meaningful.
    """
    tensors = dict(params)
    if prompt is not None:
        tensors["prompt"] = prompt.v

    def objective():
        return batch_loss(arch, forward_logits(arch, params, prompt, X, M, lengths), y)

    for t in tensors.values():
        t.grad = None
    loss = objective()
    if ad.kink_margin() < KINK_CLEARANCE:
        ad.get_tape().reset()
        return None
    ad.backward(loss)
    worst = 0.0
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = ad.finite_difference(objective, t, eps)
        worst = max(worst, float(ad.relative_error(analytic, numeric).max()))
        t.grad = None
    return worst


def gradient_suite(instances=20, seed=0, protocols=("pai", "zero"), eps=1e-4):
    """Run ``instances`` random checks for every backbone x head x protocol.

    Returns one dict per combination with the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    results = []
    for backbone, head, protocol in itertools.product(BACKBONES, HEADS, protocols):
        t0 = time.perf_counter()
        worst = 0.0
        done = skipped = 0
        while done < instances:
            inst = random_instance(backbone, head, protocol, rng)
            err = check_instance(*inst, eps=eps)
            if err is None:
                skipped += 1
                continue
            worst = max(worst, err)
            done += 1
        results.append({"backbone": backbone, "head": head, "protocol": protocol,
                        "instances": done, "resampled": skipped, "max_rel_error": worst,
                        "seconds": time.perf_counter() - t0})
    return results
