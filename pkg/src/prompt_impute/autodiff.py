"""Small reverse-mode differentiation engine over dense float64 arrays.

Every differentiable operation appends a node to the active :class:`Tape`.
``backward`` walks the tape in reverse append order, so each node is visited
once and gradients of leaves used several times accumulate additively.

>>> x = tensor([3], [1.0, 2.0, 3.0], requires_grad=True)
>>> backward((x * x).sum())
>>> x.grad
array([2., 4., 6.])
"""

from contextlib import contextmanager

import numpy as np

from .errors import NumericError, ShapeError, StateError

DTYPE = np.float64


class Node:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward):
        self.kind = kind
        self.inputs = inputs
        # backward(grad_out) -> tuple of input grads (None where not needed)
        self.backward = backward


class Tape:
    """Append-only record of the operations since the last reset."""

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self):
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()
_GRAD_ENABLED = True


def get_tape():
    return _TAPE


@contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        data = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(data)):
            raise ValueError("tensor values must be finite")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._generation = None

    @classmethod
    def _result(cls, data, requires_grad):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        out.node_id = None
        out._generation = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._result(self.data, False)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def _not_scalar():
    raise ValueError("only size-1 tensors convert to a scalar")


def tensor(shape, values, requires_grad=False):
    """Build a leaf tensor from a shape and row-major values."""
    shape = tuple(int(s) for s in shape)
    values = np.asarray(values, dtype=DTYPE).reshape(-1)
    if int(np.prod(shape, dtype=np.int64)) != values.size:
        raise ValueError(f"shape {shape} does not hold {values.size} values")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


tensor_create = tensor


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._result(np.asarray(x, dtype=DTYPE), False)


def _record(kind, data, inputs, backward_fn):
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor._result(data, needs)
    if needs:
        out.node_id = _TAPE.append(Node(kind, inputs, backward_fn))
        out._generation = _TAPE.generation
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("transpose needs at least two dimensions")
    return _record("transpose", np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    x = a.data
    return _record("relu", np.maximum(x, 0.0), (a,), lambda g: (np.where(x > 0, g, 0.0),))


def log(a):
    a = as_tensor(a)
    x = a.data
    if (x <= 0).any():
        raise NumericError("log of a non-positive value")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def softplus(a):
    """log(1 + exp(x)) without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def softmax_rows(a):
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError("softmax over an empty row")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax-rows", out, (a,), backward)


def concat(tensors):
    """Concatenate along the last dimension."""
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise ShapeError("concat: leading dimensions differ")
    bounds = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _record("concat-last-dim", np.concatenate([t.data for t in tensors], axis=-1),
                   tensors, backward)


def slice_(a, index):
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _record("slice", out, (a,), backward)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    if count == 0:
        raise ValueError("mean of an empty tensor")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _record("mean", np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward)


def masked_fill(x, mask, v):
    """Keep ``x`` where ``mask`` is 1, use ``v[n]`` where it is 0.

    ``v`` has one entry per feature (the last axis of ``x``) and is broadcast
    over every other axis. Gradient into ``v[n]`` is the sum of the upstream
    gradient over the masked positions of feature ``n``; masked entries of
    ``x`` receive exactly zero.
    """
    x, v = as_tensor(x), as_tensor(v)
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs values {x.shape}")
    if v.ndim != 1 or x.ndim == 0 or v.shape[0] != x.shape[-1]:
        raise ShapeError(f"masked_fill: fill vector {v.shape} vs values {x.shape}")
    observed = mask.astype(bool)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = np.where(observed, g, 0.0) if x.requires_grad else None
        gv = np.where(observed, 0.0, g).sum(axis=lead) if v.requires_grad else None
        return gx, gv

    return _record("masked_fill", np.where(observed, x.data, v.data), (x, v), backward)


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "log": log,
    "softmax-rows": softmax_rows,
    "concat-last-dim": lambda *ts: concat(ts),
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "masked_fill": masked_fill,
    "transpose": transpose,
}


def op_apply(kind, *inputs, **attrs):
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **attrs)


def backward(loss):
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    The tape is reset afterwards.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    tape = _TAPE
    if loss.node_id is None or loss._generation != tape.generation or not tape.nodes:
        raise StateError("loss was not produced on the current tape")
    grads = {loss.node_id: np.ones_like(loss.data)}
    nodes = tape.nodes
    for i in range(loss.node_id, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is not None and inp._generation == tape.generation:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=DTYPE)
            else:
                inp.grad = inp.grad + gi
    tape.reset()


def finite_difference(f, params, eps=1e-4):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``params.data``.

    ``f`` takes no arguments and reads ``params`` itself; entries are
    perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = params.data.reshape(-1)
    out = np.zeros(flat.size, dtype=DTYPE)

    def evaluate():
        with no_grad():
            val = f()
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not np.isfinite(val):
            raise NumericError(f"objective returned {val}")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate()
        flat[i] = orig - eps
        lo = evaluate()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(params.shape)


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def kink_margin():
    """Smallest |input| over relu nodes on the current tape (inf if none)."""
    margin = np.inf
    for node in _TAPE.nodes:
        if node.kind == "relu":
            x = node.inputs[0].data
            if x.size:
                margin = min(margin, float(np.abs(x).min()))
    return margin
