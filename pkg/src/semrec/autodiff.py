"""Dense reverse-mode autodiff on numpy arrays.

Every primitive records its inputs and a backward closure on the output
tensor. Nodes carry a creation counter, so sorting the reachable nodes by
that counter recovers the execution order of the tape; ``backward`` walks it
in reverse.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _as_array(x, dtype=None):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op=""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._id = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _lift(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _op=op)
    if req:
        out._backward = backward
    return out


def parameter(data, name=None):
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = _lift(a), _lift(b, a.dtype if isinstance(a, Tensor) else None)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out_data, (a, b), backward, "add")


def mul(a, b):
    a = _lift(a)
    b = _lift(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out_data, (a, b), backward, "mul")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a):
    out_data = 1.0 / a.data
    return _node(out_data, (a,), lambda g: (-g * out_data * out_data,), "reciprocal")


def square(a):
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a):
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: (0.5 * g / out_data,), "sqrt")


def exp(a):
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def matmul(a, b):
    """Matrix product; leading dims broadcast like ``np.matmul``."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out_data, (a, b), backward, "matmul")


def relu(a):
    out_data = np.maximum(a.data, 0)
    return _node(out_data, (a,), lambda g: (g * (a.data > 0),), "relu")


def sigmoid(a):
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),), "sigmoid")


def tanh(a):
    out_data = np.tanh(a.data)
    return _node(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)),)

    return _node(out_data, (a,), backward, "softmax")


def softmax_rows(a):
    return softmax(a, axis=-1)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return _node(out_data, (a,), backward, "log_softmax")


def layer_norm_rows(a, eps=1e-5):
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out_data).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out_data * gy),)

    return _node(out_data, (a,), backward, "layer_norm")


def dropout(a, p, key=None):
    """Inverted dropout. ``key=None`` means eval mode (identity).

    ``key`` is a tuple of ints, typically (seed, step, site); the mask is a
    pure function of it so reruns reproduce exactly.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if key is None or p == 0.0:
        return a
    rng = np.random.default_rng([int(k) for k in key])
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _node(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def stop_gradient(a):
    """Forward identity, no gradient to ``a``."""
    return Tensor(a.data if isinstance(a, Tensor) else np.asarray(a))


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out_data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[ax] for ax in axes)
    return mul(tsum(a, axis, keepdims), np.asarray(1.0 / n, dtype=a.dtype))


def reshape(a, shape):
    out_data = a.data.reshape(shape)
    return _node(out_data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(out_data, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out_data, (a,), backward, "getitem")


def take_rows(table, idx):
    """Embedding lookup: ``table[idx]`` along axis 0 for integer ``idx``."""
    idx = np.asarray(idx)
    out_data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _node(out_data, (table,), backward, "take_rows")


def pick(a, idx):
    """Gather one entry per row along the last axis: ``a[..., idx[...]]``."""
    idx = np.asarray(idx)
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _node(out_data, (a,), backward, "pick")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out_data, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out_data, tensors, backward, "stack")


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0), a.shape),
                _unbroadcast(np.where(cond, 0, g), b.shape))

    return _node(out_data, (a, b), backward, "where")


# ---------------------------------------------------------------- composites


def l2_normalize_rows(a, eps=1e-12):
    norm = sqrt(tsum(square(a), axis=-1, keepdims=True) + eps)
    return a * reciprocal(norm)


def sum_squares(a, axis=-1):
    return tsum(square(a), axis=axis)


def cross_entropy(logits, targets):
    """Per-row negative log-likelihood of integer ``targets``."""
    return neg(pick(log_softmax(logits, axis=-1), targets))


# ---------------------------------------------------------------- backward


def tape_of(loss):
    """Nodes reachable from ``loss`` in execution order."""
    seen = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack_.extend(t._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss):
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape_of(loss)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node._accum(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


Tensor.backward = backward


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def state_arrays(self):
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays, step_count):
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=self.params[k].dtype)
        self.step_count = int(step_count)


# ---------------------------------------------------------------- grad check


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f()`` wrt array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grads(loss_fn, params, h=1e-5):
    """Max relative error between analytic and numerical grads over ``params``.

    ``loss_fn`` builds a fresh graph from the current parameter values and
    returns a scalar Tensor.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(lambda: float(loss_fn().data), p.data, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst
