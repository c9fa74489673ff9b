"""Learnable feature prompt filled in at missing positions."""

import json

import numpy as np

from . import autodiff as ad
from .errors import StateError

ZEROS = "zeros"
UNIFORM = "uniform"
FEATURE_MEANS = "feature-means"
UNIFORM_EPS = 0.1


class FeaturePrompt:
    """One learnable scalar per feature, shared across time steps and records."""

    def __init__(self, values, init_strategy=ZEROS, seed=None):
        self.v = ad.Tensor(np.asarray(values, dtype=np.float64).reshape(-1), requires_grad=True)
        self.init_strategy = init_strategy
        self.seed = seed
        self.frozen = False

    @property
    def requires_grad(self):
        return self.v.requires_grad

    def __len__(self):
        return self.v.shape[0]

    def values(self):
        return self.v.data.copy()

    def freeze(self):
        self.frozen = True
        self.v.requires_grad = False
        self.v.grad = None
        self.v.data.setflags(write=False)
        return self

    def set_values(self, values):
        if self.frozen:
            raise StateError("prompt is frozen")
        self.v.data[...] = values

    def copy(self):
        out = FeaturePrompt(self.values(), self.init_strategy, self.seed)
        if self.frozen:
            out.freeze()
        return out

    def to_dict(self):
        return {"values": self.v.data.tolist(), "init_strategy": self.init_strategy,
                "seed": self.seed, "frozen": self.frozen}

    @classmethod
    def from_dict(cls, d):
        out = cls(d["values"], d.get("init_strategy", ZEROS), d.get("seed"))
        if d.get("frozen"):
            out.freeze()
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def init_prompt(strategy, N, stats=None, seed=0):
    if strategy == ZEROS:
        values = np.zeros(N)
    elif strategy == UNIFORM:
        values = np.random.default_rng(seed).uniform(-UNIFORM_EPS, UNIFORM_EPS, size=N)
    elif strategy == FEATURE_MEANS:
        if stats is None:
            raise ValueError("feature-means initialization needs normalization stats")
        values = np.asarray(stats.mean, dtype=np.float64).copy()
        if values.shape != (N,):
            raise ValueError(f"stats cover {values.shape[0]} features, expected {N}")
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")
    return FeaturePrompt(values, strategy, seed)


def freeze(prompt):
    return prompt.freeze()


def fill_prompt(X, M, prompt):
    """X' = X where observed, prompt value of the feature where missing."""
    v = prompt.v if isinstance(prompt, FeaturePrompt) else prompt
    return ad.masked_fill(X, M, v)
