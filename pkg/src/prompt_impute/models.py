"""Sequence encoders (backbones) and prediction heads.

All forward functions are batched: inputs are ``(K, L, N)`` tensors padded
along time, together with the true length of each record. Weight matrices
are stored ``(out, in)``.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

BACKBONES = ("rnn", "gru", "attention")
HEADS = ("linear-classifier", "mlp-regressor")
GRU_GATES = ("z", "r", "h")
MASK_BIAS = -1e9


@dataclass
class ArchConfig:
    backbone: str = "gru"
    input_dim: int = 8
    hidden_dim: int = 32
    layers: int = 1
    head: str = "linear-classifier"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden_dim < 1 or self.input_dim < 1:
            raise ValueError("hidden_dim and input_dim must be >= 1")

    def to_dict(self):
        return asdict(self)


def head_for_task(task):
    return "linear-classifier" if task == "classification" else "mlp-regressor"


def param_shapes(cfg):
    """Ordered mapping name -> shape; the order fixes init and traversal order."""
    d, N = cfg.hidden_dim, cfg.input_dim
    shapes = {}
    if cfg.backbone == "rnn":
        for l in range(cfg.layers):
            fan = N if l == 0 else d
            shapes[f"rnn{l}.W"] = (d, fan)
            shapes[f"rnn{l}.U"] = (d, d)
            shapes[f"rnn{l}.b"] = (d,)
    elif cfg.backbone == "gru":
        for l in range(cfg.layers):
            fan = N if l == 0 else d
            for g in GRU_GATES:
                shapes[f"gru{l}.W_{g}"] = (d, fan)
                shapes[f"gru{l}.U_{g}"] = (d, d)
                shapes[f"gru{l}.b_{g}"] = (d,)
    else:
        shapes["attn.W_in"] = (d, N)
        shapes["attn.b_in"] = (d,)
        for l in range(cfg.layers):
            # no key bias: it shifts every score in a row equally, so softmax ignores it
            for p in ("q", "k", "v", "o"):
                shapes[f"attn{l}.W_{p}"] = (d, d)
                if p != "k":
                    shapes[f"attn{l}.b_{p}"] = (d,)
            shapes[f"attn{l}.W_ff1"] = (d, d)
            shapes[f"attn{l}.b_ff1"] = (d,)
            shapes[f"attn{l}.W_ff2"] = (d, d)
            shapes[f"attn{l}.b_ff2"] = (d,)
    if cfg.head == "linear-classifier":
        shapes["head.w"] = (1, d)
        shapes["head.b"] = (1,)
    else:
        shapes["head.W1"] = (d, d)
        shapes["head.b1"] = (d,)
        shapes["head.W2"] = (1, d)
        shapes["head.b2"] = (1,)
    return shapes


def init_model(cfg, seed=0):
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = ad.Tensor(data, requires_grad=True)
    return params


def count_parameters(params, prompt=None):
    model_count = int(sum(p.data.size for p in params.values()))
    prompt_count = 0 if prompt is None else int(len(prompt))
    ratio = prompt_count / model_count if model_count else 0.0
    return {"model_count": model_count, "prompt_count": prompt_count, "ratio": ratio}


def closed_form_count(cfg):
    """Parameter count from the architecture alone."""
    d, N, L = cfg.hidden_dim, cfg.input_dim, cfg.layers
    if cfg.backbone == "rnn":
        body = (d * N + d * d + d) + (L - 1) * (d * d + d * d + d)
    elif cfg.backbone == "gru":
        body = 3 * (d * N + d * d + d) + (L - 1) * 3 * (2 * d * d + d)
    else:
        body = d * N + d + L * (6 * d * d + 5 * d)
    head = d + 1 if cfg.head == "linear-classifier" else d * d + d + d + 1
    return body + head


def _length_mask(lengths, L):
    return (np.arange(L)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def _linear(x, W, b):
    return ad.add(ad.matmul(x, ad.transpose(W)), b)


def _recurrent(cfg, params, X, lengths):
    K, L, _ = X.shape
    active = _length_mask(lengths, L)
    d = cfg.hidden_dim
    seq_in = None
    h = None
    for l in range(cfg.layers):
        if cfg.backbone == "rnn":
            names = (f"rnn{l}.W",)
        else:
            names = tuple(f"gru{l}.W_{g}" for g in GRU_GATES)
        # layer 0 projects every time step in one matmul
        if l == 0:
            proj = [ad.matmul(X, ad.transpose(params[n])) for n in names]
        Ut = {}
        if cfg.backbone == "rnn":
            Ut["h"] = ad.transpose(params[f"rnn{l}.U"])
        else:
            for g in GRU_GATES:
                Ut[g] = ad.transpose(params[f"gru{l}.U_{g}"])
        h = ad.Tensor._result(np.zeros((K, d)), False)
        outputs = []
        for t in range(L):
            if l == 0:
                xs = [p[:, t, :] for p in proj]
            else:
                xs = [ad.matmul(seq_in[t], ad.transpose(params[n])) for n in names]
            if cfg.backbone == "rnn":
                h_new = ad.tanh(xs[0] + ad.matmul(h, Ut["h"]) + params[f"rnn{l}.b"])
            else:
                z = ad.sigmoid(xs[0] + ad.matmul(h, Ut["z"]) + params[f"gru{l}.b_z"])
                r = ad.sigmoid(xs[1] + ad.matmul(h, Ut["r"]) + params[f"gru{l}.b_r"])
                cand = ad.tanh(xs[2] + ad.matmul(r * h, Ut["h"]) + params[f"gru{l}.b_h"])
                h_new = z * h + (1.0 - z) * cand
            # past a record's end the state is carried unchanged
            step = active[:, t:t + 1]
            h = h_new if step.all() else h + step * (h_new - h)
            outputs.append(h)
        seq_in = outputs
    return h


def positional_encoding(L, d):
    pos = np.arange(L)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _attention(cfg, params, X, lengths):
    K, L, _ = X.shape
    d = cfg.hidden_dim
    active = _length_mask(lengths, L)
    key_bias = ((1.0 - active) * MASK_BIAS)[:, None, :]
    H = _linear(X, params["attn.W_in"], params["attn.b_in"]) + positional_encoding(L, d)
    scale = 1.0 / math.sqrt(d)
    for l in range(cfg.layers):
        p = lambda s: params[f"attn{l}.{s}"]
        Q = _linear(H, p("W_q"), p("b_q"))
        Kt = ad.transpose(ad.matmul(H, ad.transpose(p("W_k"))))
        V = _linear(H, p("W_v"), p("b_v"))
        A = ad.softmax_rows(ad.matmul(Q, Kt) * scale + key_bias)
        H = H + _linear(ad.matmul(A, V), p("W_o"), p("b_o"))
        F = _linear(ad.relu(_linear(H, p("W_ff1"), p("b_ff1"))), p("W_ff2"), p("b_ff2"))
        H = H + F
    weights = (active / active.sum(axis=1, keepdims=True))[:, :, None]
    return ad.sum_(H * weights, axis=1)


def backbone_forward(cfg, params, X, lengths):
    """Encode a padded batch ``(K, L, N)`` into embeddings ``(K, d)``.

    A single record may be passed as ``(L, N)`` with an integer length; the
    result is then a length-d vector.
    """
    X = ad.as_tensor(X)
    single = X.ndim == 2
    if single:
        X = ad.slice_(X, (None,))
        lengths = [lengths]
    lengths = np.asarray(lengths, dtype=int).reshape(-1)
    if X.ndim != 3 or X.shape[2] != cfg.input_dim:
        raise ad.ShapeError(f"expected (K, L, {cfg.input_dim}) input, got {X.shape}")
    if lengths.size != X.shape[0]:
        raise ValueError("one length per record required")
    if (lengths < 1).any():
        raise ValueError("record length must be positive")
    if (lengths > X.shape[1]).any():
        raise ValueError("length exceeds the number of rows")
    if cfg.backbone == "attention":
        e = _attention(cfg, params, X, lengths)
    else:
        e = _recurrent(cfg, params, X, lengths)
    return e[0] if single else e


def head_logits(cfg, params, e):
    """Pre-activation output, shape ``(K,)`` (or scalar-shaped for one embedding)."""
    single = e.ndim == 1
    if single:
        e = ad.slice_(e, (None,))
    if cfg.head == "linear-classifier":
        out = _linear(e, params["head.w"], params["head.b"])
    else:
        hidden = ad.relu(_linear(e, params["head.W1"], params["head.b1"]))
        out = _linear(hidden, params["head.W2"], params["head.b2"])
    out = ad.slice_(out, (slice(None), 0))
    return out[0] if single else out


def head_forward(cfg, params, e):
    """Probabilities for the classifier head, raw values for the regressor."""
    out = head_logits(cfg, params, e)
    return ad.sigmoid(out) if cfg.head == "linear-classifier" else out


# -- checkpoints -----------------------------------------------------------

def save_params(params, cfg, directory, seed=None):
    """JSON manifest plus one little-endian float64 blob per tensor."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"arch": cfg.to_dict(), "seed": seed, "tensors": {}}
    for name, t in params.items():
        fname = f"{name}.bin"
        np.ascontiguousarray(t.data, dtype="<f8").tofile(os.path.join(directory, fname))
        manifest["tensors"][name] = {"file": fname, "shape": list(t.shape)}
    with open(os.path.join(directory, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def load_params(directory):
    with open(os.path.join(directory, "model.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = ArchConfig(**manifest["arch"])
    params = {}
    for name in param_shapes(cfg):
        info = manifest["tensors"][name]
        data = np.fromfile(os.path.join(directory, info["file"]), dtype="<f8").reshape(info["shape"])
        params[name] = ad.Tensor(data.astype(np.float64), requires_grad=True)
    return cfg, params, manifest.get("seed")
