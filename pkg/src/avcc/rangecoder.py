"""Adaptive range coding for the codec's symbol streams.

A 32-bit carry-less range coder drives Laplace-smoothed adaptive frequency
models held in Fenwick trees. A byte is emitted once the top byte of the
interval is settled; on underflow (``range < 2^16`` with the top byte still
straddling a boundary) the range is truncated to the next 2^16 boundary,
which settles it. Encoder and decoder apply identical model updates per
symbol, so a payload is decodable exactly when the decoder starts from
identically initialized models.

Multiple models can share one arithmetic stream: each symbol carries a context
id selecting the model that codes it. The container uses this for per-
dictionary-index pose models and per-ensemble-member audio models.

Hot loops compile under numba when available; the pure-Python path is the same
code object and produces identical bytes, just slowly.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CorruptionError, InputError

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


MAX_TOTAL = 1 << 16
INCREMENT = 16  # adaptation speed; unspecified upstream, see package notes
_TOP = 1 << 24
_BOT = 1 << 16
_M32 = 0xFFFFFFFF
_MAX_ALPHABET = MAX_TOTAL // 4


class FrequencyModel:
    """Adaptive symbol statistics: counts start at 1 and grow by INCREMENT.

    When ``total`` would reach ``max_total`` the counts halve (floored at 1).
    The same rule runs inside the coding kernels; this object exists for
    inspection, lock-step verification and rate estimation.
    """

    def __init__(self, alphabet_size, max_total=MAX_TOTAL, increment=INCREMENT):
        if not 1 <= alphabet_size <= _MAX_ALPHABET:
            raise InputError(f"alphabet size {alphabet_size} outside [1, {_MAX_ALPHABET}]")
        self.alphabet_size = int(alphabet_size)
        self.max_total = int(max_total)
        self.increment = int(increment)
        self.counts = np.ones(alphabet_size, dtype=np.uint32)
        self.total = alphabet_size

    def update(self, symbol):
        self.counts[symbol] += self.increment
        self.total += self.increment
        if self.total >= self.max_total:
            self.counts = np.maximum(self.counts >> 1, 1).astype(np.uint32)
            self.total = int(self.counts.sum())

    def probabilities(self):
        return self.counts.astype(np.float64) / self.total

    def copy(self):
        dup = FrequencyModel(self.alphabet_size, self.max_total, self.increment)
        dup.counts = self.counts.copy()
        dup.total = self.total
        return dup


# -- Fenwick-tree helpers (operate on one row of a [C, Kmax+1] bank) -------------


@njit(cache=True)
def _tree_add(tree, c, i, delta, k):
    i += 1
    while i <= k:
        tree[c, i] += delta
        i += i & (-i)


@njit(cache=True)
def _tree_prefix(tree, c, i):
    total = 0
    while i > 0:
        total += tree[c, i]
        i -= i & (-i)
    return total


@njit(cache=True)
def _tree_find(tree, c, k, top_bit, target):
    """Largest symbol s with prefix(s) <= target; returns (s, prefix(s))."""
    pos = 0
    rem = target
    bit = top_bit
    while bit > 0:
        nxt = pos + bit
        if nxt <= k and tree[c, nxt] <= rem:
            pos = nxt
            rem -= tree[c, nxt]
        bit >>= 1
    return pos, target - rem


@njit(cache=True)
def _rebuild(tree, counts, c, k):
    for i in range(k + 1):
        tree[c, i] = 0
    total = 0
    for s in range(k):
        _tree_add(tree, c, s, counts[c, s], k)
        total += counts[c, s]
    return total


@njit(cache=True)
def _init_models(ks, kmax):
    n_ctx = ks.shape[0]
    counts = np.ones((n_ctx, kmax), dtype=np.int64)
    tree = np.zeros((n_ctx, kmax + 1), dtype=np.int64)
    totals = np.zeros(n_ctx, dtype=np.int64)
    for c in range(n_ctx):
        for s in range(kmax):
            if s >= ks[c]:
                counts[c, s] = 0
        totals[c] = _rebuild(tree, counts, c, ks[c])
    return counts, tree, totals


@njit(cache=True)
def _bump(counts, tree, totals, c, s, k, increment, max_total):
    counts[c, s] += increment
    _tree_add(tree, c, s, increment, k)
    totals[c] += increment
    if totals[c] >= max_total:
        for i in range(k):
            half = counts[c, i] >> 1
            counts[c, i] = half if half > 0 else 1
        totals[c] = _rebuild(tree, counts, c, k)


@njit(cache=True)
def _encode_kernel(symbols, ctx_ids, ks, top_bits, increment, max_total, out):
    kmax = 0
    for c in range(ks.shape[0]):
        if ks[c] > kmax:
            kmax = ks[c]
    counts, tree, totals = _init_models(ks, kmax)

    low = 0
    rng = _M32
    pos = 0
    for n in range(symbols.shape[0]):
        c = ctx_ids[n]
        s = symbols[n]
        k = ks[c]
        tot = totals[c]
        r = rng // tot
        cum = _tree_prefix(tree, c, s)
        fr = counts[c, s]
        low = low + r * cum
        if cum + fr == tot:
            rng = rng - r * cum
        else:
            rng = r * fr
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass  # top byte settled, emit it
            elif rng < _BOT:
                rng = (0 - low) & (_BOT - 1)  # underflow: truncate to boundary
            else:
                break
            out[pos] = (low >> 24) & 0xFF
            pos += 1
            low = (low << 8) & _M32
            rng = rng << 8
        _bump(counts, tree, totals, c, s, k, increment, max_total)

    for _ in range(4):
        out[pos] = (low >> 24) & 0xFF
        pos += 1
        low = (low << 8) & _M32
    return pos, counts


@njit(cache=True)
def _decode_kernel(buf, n_symbols, ctx_ids, ks, top_bits, increment, max_total, out):
    kmax = 0
    for c in range(ks.shape[0]):
        if ks[c] > kmax:
            kmax = ks[c]
    counts, tree, totals = _init_models(ks, kmax)

    low = 0
    rng = _M32
    code = 0
    pos = 0
    overrun = False
    for _ in range(4):
        byte = 0
        if pos < buf.shape[0]:
            byte = buf[pos]
        else:
            overrun = True
        code = ((code << 8) | byte) & _M32
        pos += 1

    for n in range(n_symbols):
        c = ctx_ids[n]
        k = ks[c]
        tot = totals[c]
        r = rng // tot
        dv = ((code - low) & _M32) // r
        if dv >= tot:
            dv = tot - 1
        s, cum = _tree_find(tree, c, k, top_bits[c], dv)
        fr = counts[c, s]
        out[n] = s
        low = low + r * cum
        if cum + fr == tot:
            rng = rng - r * cum
        else:
            rng = r * fr
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (0 - low) & (_BOT - 1)
            else:
                break
            byte = 0
            if pos < buf.shape[0]:
                byte = buf[pos]
            else:
                overrun = True
            code = ((code << 8) | byte) & _M32
            low = (low << 8) & _M32
            rng = rng << 8
            pos += 1
        _bump(counts, tree, totals, c, s, k, increment, max_total)
    return overrun, counts


@njit(cache=True)
def _estimate_kernel(symbols, init_counts, k, increment, max_total):
    counts = np.zeros((1, k), dtype=np.int64)
    tree = np.zeros((1, k + 1), dtype=np.int64)
    for s in range(k):
        counts[0, s] = init_counts[s]
    totals = np.zeros(1, dtype=np.int64)
    totals[0] = _rebuild(tree, counts, 0, k)
    bits = 0.0
    for n in range(symbols.shape[0]):
        s = symbols[n]
        bits += -np.log2(counts[0, s] / totals[0])
        _bump(counts, tree, totals, 0, s, k, increment, max_total)
    return bits


# -- public API ------------------------------------------------------------------


def _top_bits(ks):
    out = np.ones(len(ks), dtype=np.int64)
    for i, k in enumerate(ks):
        bit = 1
        while bit * 2 <= k:
            bit *= 2
        out[i] = bit
    return out


def _validate(symbols, ctx_ids, alphabet_sizes):
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    if symbols.ndim != 1:
        raise InputError("symbol stream must be one-dimensional")
    ctx_ids = np.ascontiguousarray(ctx_ids, dtype=np.int64)
    if ctx_ids.shape != symbols.shape:
        raise InputError("context ids must align with symbols")
    ks = np.ascontiguousarray(alphabet_sizes, dtype=np.int64)
    for k in ks:
        if not 1 <= k <= _MAX_ALPHABET:
            raise InputError(f"alphabet size {k} outside [1, {_MAX_ALPHABET}]")
    if symbols.size:
        if ctx_ids.min() < 0 or ctx_ids.max() >= len(ks):
            raise InputError("context id out of range")
        if symbols.min() < 0 or (symbols >= ks[ctx_ids]).any():
            raise InputError("symbol out of range for its alphabet")
    return symbols, ctx_ids, ks


def encode_contexts(symbols, ctx_ids, alphabet_sizes, models=None) -> bytes:
    """Encode ``symbols`` (context id per symbol) into a count-prefixed payload.

    ``models`` may pass FrequencyModel instances to receive the final adaptive
    state (their increments/max_total must be the defaults the kernels use).
    """
    symbols, ctx_ids, ks = _validate(symbols, ctx_ids, alphabet_sizes)
    payload = struct.pack("<I", symbols.size)
    if symbols.size == 0:
        return payload
    out = np.zeros(symbols.size * 6 + 64, dtype=np.uint8)
    n_bytes, counts = _encode_kernel(symbols, ctx_ids, ks, _top_bits(ks), INCREMENT, MAX_TOTAL, out)
    if models is not None:
        for c, model in enumerate(models):
            model.counts = counts[c, : ks[c]].astype(np.uint32)
            model.total = int(model.counts.sum())
    return payload + out[:n_bytes].tobytes()


def decode_contexts(payload, ctx_ids, alphabet_sizes, models=None) -> np.ndarray:
    """Inverse of :func:`encode_contexts`; the expected context layout is given
    by ``ctx_ids`` and must match the embedded symbol count."""
    if len(payload) < 4:
        raise CorruptionError("payload shorter than its count prefix")
    (count,) = struct.unpack("<I", payload[:4])
    ctx_ids = np.ascontiguousarray(ctx_ids, dtype=np.int64)
    if count != ctx_ids.size:
        raise CorruptionError(f"payload declares {count} symbols, context layout has {ctx_ids.size}")
    ks = np.ascontiguousarray(alphabet_sizes, dtype=np.int64)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    dummy = np.zeros(count, dtype=np.int64)
    _, _, ks = _validate(dummy, ctx_ids, ks)
    buf = np.frombuffer(payload, dtype=np.uint8, offset=4)
    out = np.zeros(count, dtype=np.int64)
    overrun, counts = _decode_kernel(buf, count, ctx_ids, ks, _top_bits(ks), INCREMENT, MAX_TOTAL, out)
    if overrun:
        raise CorruptionError("payload truncated: range decoder ran past its end")
    if models is not None:
        for c, model in enumerate(models):
            model.counts = counts[c, : ks[c]].astype(np.uint32)
            model.total = int(model.counts.sum())
    return out


def encode_stream(symbols, model: FrequencyModel) -> bytes:
    """Single-model payload: u32 symbol count, then range-coded bytes.

    ``model`` must be freshly initialized (the decoder rebuilds the same start
    state); it is updated in place to the final adaptive state.
    """
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    return encode_contexts(symbols, np.zeros(symbols.size, dtype=np.int64), [model.alphabet_size], [model])


def decode_stream(payload, model: FrequencyModel, expected_count=None) -> np.ndarray:
    """Decode a payload produced by :func:`encode_stream` with an identically
    initialized model. Exact inverse; updates ``model`` in place."""
    if len(payload) < 4:
        raise CorruptionError("payload shorter than its count prefix")
    (count,) = struct.unpack("<I", payload[:4])
    if expected_count is not None and count != expected_count:
        raise CorruptionError(f"payload declares {count} symbols, expected {expected_count}")
    return decode_contexts(payload, np.zeros(count, dtype=np.int64), [model.alphabet_size], [model])


def rate_estimate(symbols, model: FrequencyModel, adaptive=True) -> float:
    """Information content of ``symbols`` in bits under ``model``.

    Adaptive mode replays the coder's own model trajectory and tracks the real
    payload to within renormalization slack; the frozen variant scores against
    the initial counts only (n * log2(K) for a fresh uniform model).
    """
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return 0.0
    if symbols.min() < 0 or symbols.max() >= model.alphabet_size:
        raise InputError("symbol out of range for the model alphabet")
    if not adaptive:
        probs = model.probabilities()
        return float(-np.log2(probs[symbols]).sum())
    init = np.ascontiguousarray(model.counts, dtype=np.int64)
    return float(_estimate_kernel(symbols, init, model.alphabet_size, model.increment, model.max_total))
