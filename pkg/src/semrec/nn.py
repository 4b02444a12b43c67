"""Small parameter containers and layers built on :mod:`semrec.autodiff`."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Collects Tensors / Modules / lists of Modules set as attributes."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, sub in enumerate(val):
                    if isinstance(sub, Module):
                        yield from sub.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, arrays):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"missing parameters in state: {missing}")
        for k, p in own.items():
            arr = np.asarray(arrays[k])
            if arr.shape != p.shape:
                raise ad.ShapeError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def init_normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, dtype=np.float32, bias=True, std=None):
        std = (1.0 / np.sqrt(n_in)) if std is None else std
        self.weight = ad.parameter(init_normal(rng, (n_in, n_out), std, dtype))
        self.bias = ad.parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        self.gain = ad.parameter(np.ones(dim, dtype=dtype))
        self.shift = ad.parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x):
        return ad.layer_norm_rows(x) * self.gain + self.shift


class MLP(Module):
    """Linear -> ReLU -> ... -> Linear."""

    def __init__(self, rng, sizes, dtype=np.float32, last_std=None):
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = last_std if (last_std is not None and i == len(sizes) - 2) else None
            self.layers.append(Linear(rng, a, b, dtype, std=std))

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (batch, len, dim) inputs.

    ``key_mask`` is a boolean (batch, len_k) array, True where a key may be
    attended to.
    """

    def __init__(self, rng, dim, n_heads, dtype=np.float32):
        if dim % n_heads:
            raise ad.ConfigError(f"hidden dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(rng, dim, dim, dtype)
        self.k = Linear(rng, dim, dim, dtype)
        self.v = Linear(rng, dim, dim, dtype)
        self.o = Linear(rng, dim, dim, dtype)

    def _split(self, x):
        b, n, d = x.shape
        h = self.n_heads
        return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)

    def __call__(self, query, context, key_mask=None, dropout_key=None, p_drop=0.0):
        b, nq, d = query.shape
        dh = d // self.n_heads
        q = self._split(self.q(query))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * np.asarray(1.0 / np.sqrt(dh), dtype=query.dtype)
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, -1e9).astype(query.dtype)[:, None, None, :]
            scores = scores + bias
        attn = ad.softmax(scores, axis=-1)
        if dropout_key is not None:
            attn = ad.dropout(attn, p_drop, dropout_key)
        out = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self.o(out)
