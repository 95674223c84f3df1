"""Minimal layer library over :mod:`avcc.tensor`.

Every layer takes its full dotted name at construction and derives its init
generator from ``rng_for(seed, parameter_name)``. Two models built with the
same seed therefore share bit-identical parameters wherever their names agree,
no matter which other parameters exist around them. That property is what
makes architecture-flag ablations clean.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import Tensor, conv2d, layer_norm, matmul, rng_for, softmax


class Module:
    """Container tracking parameters and child modules by name."""

    def __init__(self):
        self._params = {}
        self._mods = {}

    def param(self, name, tensor):
        self._params[name] = tensor
        return tensor

    def mod(self, name, module):
        self._mods[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for key, t in self._params.items():
            out[prefix + key] = t
        for key, m in self._mods.items():
            out.update(m.named_parameters(prefix + key + "."))
        return out

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state(self, arrays, prefix=""):
        """Assign parameter data from ``arrays`` (name -> ndarray), strictly."""
        for name, t in self.named_parameters().items():
            key = prefix + name
            if key not in arrays:
                raise FormatError(f"checkpoint missing parameter {key!r}")
            value = np.asarray(arrays[key], dtype=t.data.dtype)
            if value.shape != t.data.shape:
                raise FormatError(f"checkpoint shape {value.shape} != {t.data.shape} for {key!r}")
            t.data = value.copy()

    def set_requires_grad(self, flag):
        for t in self.named_parameters().values():
            t.requires_grad = bool(flag)
            if not flag:
                t.grad = None


def _normal(seed, name, shape, std):
    rng = rng_for(seed, name)
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, name, seed, din, dout, zero=False):
        super().__init__()
        if zero:
            w = np.zeros((din, dout), dtype=np.float32)
        else:
            w = _normal(seed, name + ".w", (din, dout), 1.0 / np.sqrt(din))
        self.w = self.param("w", Tensor(w, requires_grad=True))
        self.b = self.param("b", Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True))

    def __call__(self, x):
        return matmul(x, self.w) + self.b


class Conv2d(Module):
    """Square-kernel convolution, NHWC."""

    def __init__(self, name, seed, k, cin, cout, stride=1, pad=0):
        super().__init__()
        self.stride = stride
        self.pad = pad
        w = _normal(seed, name + ".w", (k, k, cin, cout), 1.0 / np.sqrt(k * k * cin))
        self.w = self.param("w", Tensor(w, requires_grad=True))
        self.b = self.param("b", Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True))

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.g = self.param("g", Tensor(np.ones(dim, dtype=np.float32), requires_grad=True))
        self.b = self.param("b", Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True))

    def __call__(self, x):
        return layer_norm(x, self.g, self.b, eps=self.eps)


class Embedding(Module):
    def __init__(self, name, seed, count, dim, std=0.02):
        super().__init__()
        table = _normal(seed, name + ".table", (count, dim), std)
        self.table = self.param("table", Tensor(table, requires_grad=True))

    def __call__(self, idx):
        from .tensor import gather

        return gather(self.table, idx)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate Q/K/V/output projections.

    ``zero_out=True`` starts the output projection at zero, so the module is
    initially the identity when wrapped in a residual connection.
    """

    def __init__(self, name, seed, dim, heads, zero_out=False):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = self.mod("wq", Linear(name + ".wq", seed, dim, dim))
        self.wk = self.mod("wk", Linear(name + ".wk", seed, dim, dim))
        self.wv = self.mod("wv", Linear(name + ".wv", seed, dim, dim))
        self.wo = self.mod("wo", Linear(name + ".wo", seed, dim, dim, zero=zero_out))

    def __call__(self, query_input, kv_input):
        x = query_input
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
            kv_input = kv_input.reshape(1, *kv_input.shape)
        if x.ndim != 3 or kv_input.ndim != 3:
            raise ShapeError("attention expects [L,D] or [B,L,D] inputs")
        b, lq, _ = x.shape
        lk = kv_input.shape[1]
        h, hd = self.heads, self.head_dim

        q = self.wq(x).reshape(b, lq, h, hd).permute(0, 2, 1, 3)
        k = self.wk(kv_input).reshape(b, lk, h, hd).permute(0, 2, 1, 3)
        v = self.wv(kv_input).reshape(b, lk, h, hd).permute(0, 2, 1, 3)

        scores = matmul(q, k.transpose_last()) * (1.0 / np.sqrt(hd))
        attn = softmax(scores, axis=-1)
        mixed = matmul(attn, v).permute(0, 2, 1, 3).reshape(b, lq, self.dim)
        out = self.wo(mixed)
        if squeeze:
            out = out.reshape(lq, self.dim)
        return out


class Mlp(Module):
    def __init__(self, name, seed, dim, hidden):
        super().__init__()
        self.fc1 = self.mod("fc1", Linear(name + ".fc1", seed, dim, hidden))
        self.fc2 = self.mod("fc2", Linear(name + ".fc2", seed, hidden, dim))

    def __call__(self, x):
        return self.fc2(self.fc1(x).silu())


def sinusoid_encoding(positions, dim, scale=1.0):
    """Sinusoidal position table for arbitrary float positions.

    Positions are in shared time units so audio and video streams computed at
    different frame rates land on one axis.
    """
    positions = np.asarray(positions, dtype=np.float32) * scale
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float32) / max(half - 1, 1))
    angles = positions[:, None] * freqs[None, :]
    table = np.zeros((len(positions), dim), dtype=np.float32)
    table[:, :half] = np.sin(angles)
    table[:, half : 2 * half] = np.cos(angles)
    return table
