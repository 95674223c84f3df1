"""Reverse-mode automatic differentiation over numpy storage.

A :class:`Tensor` wraps a numpy array plus an optional backward closure; ops
build the compute graph implicitly and :meth:`Tensor.backward` walks it once in
reverse topological order, accumulating into ``.grad``. float32 is the
operating dtype; float64 arrays are accepted and preserved so gradient
verification can run at full precision.

Broadcasting is restricted to leading-batch-dimension expansion: the smaller
operand's shape must equal the trailing shape of the larger one. Anything else
(size-1 stretching included) raises :class:`~avcc.errors.ShapeError`.
"""

from __future__ import annotations

import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError, InputError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def rng_for(seed, name=""):
    """Deterministic generator derived from a global seed and a label.

    Mixing the label in via crc32 keeps each parameter's init independent of
    how many other parameters were created before it.
    """
    if name:
        return np.random.default_rng((int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))))
    return np.random.default_rng(int(seed) & 0xFFFFFFFF)


def _as_array(value, like=None):
    if isinstance(value, (np.ndarray, np.generic)):
        value = np.asarray(value)
        if value.dtype in _FLOAT_DTYPES:
            return value
        return value.astype(np.float32)
    dtype = like.dtype if like is not None else np.float32
    return np.asarray(value, dtype=dtype)


def _check_trailing(a_shape, b_shape, op):
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    offset = len(big) - len(small)
    if tuple(big[offset:]) != tuple(small):
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} only broadcast over leading dims")


def _unbroadcast(grad, shape):
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


class Tensor:
    """Array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- autograd -------------------------------------------------------------

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad=None):
        """Backpropagate from this node; root must be scalar unless grad given."""
        if grad is None:
            if self.size != 1:
                raise InputError("backward() on non-scalar needs an explicit seed gradient")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes will not be revisited; free their buffers
                if node is not self:
                    node.grad = None
                node._backward = None
                node._parents = ()

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            data = self.data + _as_array(other, like=self.data)

            def back(g, a=self):
                if a.requires_grad:
                    a._accumulate(g)

            return Tensor._result(data, (self,), back)
        _check_trailing(self.shape, other.shape, "add")
        data = self.data + other.data

        def back(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        def back(g, a=self):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._result(-self.data, (self,), back)

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return self + (-_as_array(other, like=self.data))
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            const = _as_array(other, like=self.data)
            data = self.data * const

            def back(g, a=self, c=const):
                if a.requires_grad:
                    a._accumulate(g * c)

            return Tensor._result(data, (self,), back)
        _check_trailing(self.shape, other.shape, "mul")
        data = self.data * other.data

        def back(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(data, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return self * (1.0 / _as_array(other, like=self.data))
        _check_trailing(self.shape, other.shape, "div")
        data = self.data / other.data

        def back(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(data, (self, other), back)

    def __rtruediv__(self, other):
        const = _as_array(other, like=self.data)
        data = const / self.data

        def back(g, a=self, c=const):
            if a.requires_grad:
                a._accumulate(-g * c / (a.data * a.data))

        return Tensor._result(data, (self,), back)

    def __pow__(self, exponent):
        p = float(exponent)
        data = self.data**p

        def back(g, a=self, p=p):
            if a.requires_grad:
                a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._result(data, (self,), back)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        data = self.data[key]

        def back(g, a=self, key=key):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[key] = g
                a._accumulate(full)

        return Tensor._result(data, (self,), back)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def back(g, a=self, old=old):
            if a.requires_grad:
                a._accumulate(g.reshape(old))

        return Tensor._result(data, (self,), back)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        data = self.data.transpose(axes)

        def back(g, a=self, inverse=inverse):
            if a.requires_grad:
                a._accumulate(g.transpose(inverse))

        return Tensor._result(data, (self,), back)

    def transpose_last(self):
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return self.permute(axes)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g, a=self, axis=axis, keepdims=keepdims):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._result(data, (self,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def back(g, a=self, y=data):
            if a.requires_grad:
                a._accumulate(g * y)

        return Tensor._result(data, (self,), back)

    def log(self):
        data = np.log(self.data)

        def back(g, a=self):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._result(data, (self,), back)

    def sqrt(self):
        data = np.sqrt(self.data)

        def back(g, a=self, y=data):
            if a.requires_grad:
                a._accumulate(g * 0.5 / y)

        return Tensor._result(data, (self,), back)

    def abs(self):
        data = np.abs(self.data)

        def back(g, a=self):
            if a.requires_grad:
                a._accumulate(g * np.sign(a.data))

        return Tensor._result(data, (self,), back)

    def tanh(self):
        data = np.tanh(self.data)

        def back(g, a=self, y=data):
            if a.requires_grad:
                a._accumulate(g * (1.0 - y * y))

        return Tensor._result(data, (self,), back)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))

        def back(g, a=self, y=data):
            if a.requires_grad:
                a._accumulate(g * y * (1.0 - y))

        return Tensor._result(data, (self,), back)

    def relu(self):
        data = np.maximum(self.data, 0.0)

        def back(g, a=self):
            if a.requires_grad:
                a._accumulate(g * (a.data > 0.0))

        return Tensor._result(data, (self,), back)

    def leaky_relu(self, slope=0.2):
        data = np.where(self.data > 0.0, self.data, self.data * slope)

        def back(g, a=self, slope=slope):
            if a.requires_grad:
                a._accumulate(g * np.where(a.data > 0.0, 1.0, slope))

        return Tensor._result(data, (self,), back)

    def silu(self):
        sig = 1.0 / (1.0 + np.exp(-self.data))
        data = self.data * sig

        def back(g, a=self, sig=sig):
            if a.requires_grad:
                a._accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))

        return Tensor._result(data, (self,), back)


# -- primitive ops with non-trivial kernels ------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` over the last two axes.

    Both operands need ``ndim >= 2``; leading dims follow the batch-expansion
    rule (the operand with fewer leading dims is broadcast).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2:
        _check_trailing(a.shape[:-2], b.shape[:-2], "matmul batch dims")
    data = a.data @ b.data

    def back(g, a=a, b=b):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._result(data, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``.

    Raises :class:`NumericError` on non-finite input; the max subtraction
    protects against overflow, not garbage.
    """
    if not np.isfinite(x.data).all():
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)

    def back(g, a=x, y=y, axis=axis):
        if a.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate((g - inner) * y)

    return Tensor._result(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm affine params must have shape {x.shape[-1:]}")
    dim = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def back(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv, dim=dim):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)

    return Tensor._result(y, (x, gain, bias), back)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NHWC layout, square kernel, symmetric zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NHWC, got {x.shape}")
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d kernel must be [k,k,Cin,Cout], got {w.shape}")
    k, _, cin, cout = w.shape
    n, h, ww_, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d channels mismatch: input {c}, kernel {cin}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (ww_ + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d output would be empty")

    if pad:
        xp = np.zeros((n, h + 2 * pad, ww_ + 2 * pad, cin), dtype=x.data.dtype)
        xp[:, pad : pad + h, pad : pad + ww_, :] = x.data
    else:
        xp = x.data

    y = np.zeros((n, oh, ow, cout), dtype=x.data.dtype)
    flat = y.reshape(-1, cout)
    for ki in range(k):
        for kj in range(k):
            xs = xp[:, ki : ki + stride * (oh - 1) + 1 : stride, kj : kj + stride * (ow - 1) + 1 : stride, :]
            flat += xs.reshape(-1, cin) @ w.data[ki, kj]
    y += b.data

    def back(g, x=x, w=w, b=b, xp=xp, stride=stride, pad=pad, k=k, oh=oh, ow=ow):
        n, h, ww_, cin = x.shape
        cout = g.shape[-1]
        gflat = g.reshape(-1, cout)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for ki in range(k):
                for kj in range(k):
                    xs = xp[:, ki : ki + stride * (oh - 1) + 1 : stride, kj : kj + stride * (ow - 1) + 1 : stride, :]
                    gw[ki, kj] = xs.reshape(-1, cin).T @ gflat
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki : ki + stride * (oh - 1) + 1 : stride, kj : kj + stride * (ow - 1) + 1 : stride, :] += (
                        gflat @ w.data[ki, kj].T
                    ).reshape(n, oh, ow, cin)
            if pad:
                gxp = gxp[:, pad : pad + h, pad : pad + ww_, :]
            x._accumulate(gxp)

    return Tensor._result(y, (x, w, b), back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling, NHWC."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x input must be NHWC, got {x.shape}")
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def back(g, a=x):
        if a.requires_grad:
            n, h2, w2, c = g.shape
            a._accumulate(g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)))

    return Tensor._result(data, (x,), back)


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for integer index arrays (embedding tables)."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise InputError("gather index must be an integer array")
    data = table.data[idx]

    def back(g, t=table, idx=idx):
        if t.requires_grad:
            full = np.zeros_like(t.data)
            np.add.at(full, idx, g)
            t._accumulate(full)

    return Tensor._result(data, (table,), back)


def concat(tensors, axis=0):
    """Concatenate along ``axis``; all other dims must match exactly."""
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g, tensors=tensors, splits=splits, axis=axis):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return Tensor._result(data, tuple(tensors), back)


# -- gradient verification -----------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-numeric gradient comparison."""

    passed: bool
    max_rel_err: float
    per_param: dict = field(default_factory=dict)


def grad_check(fn, params, eps=1e-3, tol=1e-3, max_coords=None, rng=None) -> GradCheckReport:
    """Compare backward-pass gradients against central finite differences.

    ``fn`` is a zero-argument callable returning a scalar Tensor computed from
    ``params`` (name -> Tensor with ``requires_grad``). ``max_coords`` caps how
    many coordinates per parameter are probed (seeded subsample via ``rng``);
    by default every coordinate is checked. Relative error uses a unit floor:
    ``|a - n| / max(|a|, |n|, 1)``.

    Run the graph in float64 for checks; float32 rounding noise through central
    differences at ``eps=1e-3`` can exceed the tolerance on its own.
    """
    for t in params.values():
        t.grad = None
    loss = fn()
    if loss.size != 1:
        raise InputError("grad_check objective must be scalar")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check objective is non-finite")
    loss.backward()

    worst = 0.0
    per_param = {}
    for name, t in params.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        n_coords = flat.size
        if max_coords is not None and n_coords > max_coords:
            picker = rng if rng is not None else np.random.default_rng(0)
            coords = picker.choice(n_coords, size=max_coords, replace=False)
        else:
            coords = range(n_coords)
        param_worst = 0.0
        aflat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"grad_check probe of {name}[{i}] produced non-finite loss")
            numeric = (hi - lo) / (2.0 * eps)
            a = float(aflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if rel > param_worst:
                param_worst = rel
        per_param[name] = param_worst
        worst = max(worst, param_worst)
    return GradCheckReport(passed=worst <= tol, max_rel_err=worst, per_param=per_param)


# -- checkpoint serialization ----------------------------------------------------

_CKPT_MAGIC = b"AVTN"
_CKPT_VERSION = 1


def save_tensors(path, tensors):
    """Write named arrays to ``path``.

    Layout: magic ``AVTN``, version u16, count u32, then per tensor a u16 name
    length, utf-8 name, u8 rank, u32 dims and little-endian float32 data.
    """
    items = []
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        shape = arr.shape
        arr = np.ascontiguousarray(arr, dtype="<f4").reshape(shape)  # 0-d survives
        if arr.ndim > 255:
            raise InputError(f"tensor {name!r} rank {arr.ndim} exceeds format limit")
        items.append((name, arr))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(items)))
        for name, arr in items:
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise InputError(f"tensor name too long: {name!r}")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    """Read a checkpoint written by :func:`save_tensors` into name -> float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise CorruptionError(f"checkpoint truncated reading {what}")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    offset = 0
    if need(4, "magic") != _CKPT_MAGIC:
        raise FormatError("bad checkpoint magic (expected AVTN)")
    version, count = struct.unpack("<HI", need(6, "header"))
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", need(1, "rank"))
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        n_elem = 1
        for d in dims:
            n_elem *= d
        raw = need(4 * n_elem, f"data of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if offset != len(blob):
        raise CorruptionError("checkpoint has trailing bytes")
    return out
