"""Audio tokenization: log-mel front-end, ensemble k-means, residual quantizer.

A clip becomes, per pooled window, one semantic token per ensemble member
(nearest centroid over the mean-pooled log-mel feature) plus one residual
token (signed scalar quantization of the member-0 residual projected onto the
leading row of a fixed basis fit at training time). Decoding concatenates the
member centroids and adds the dequantized residual back onto the member-0
block, which is therefore the best available reconstruction of the pooled
feature.

Codebook fitting runs in float64 for numerical robustness; everything stored
or emitted is float32.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, DataError, FormatError, InputError
from .tensor import rng_for

N_FFT = 512
HOP = 256
N_MELS = 40
SAMPLE_RATE = 16000
ENSEMBLE_SIZE = 2
CODEBOOK_K = 256
RESIDUAL_LEVELS = 16
_RESIDUAL_RANK = 8
_MEL_FLOOR = 1e-6


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise InputError("audio clip must be a mono 1-D array")
        if not np.isfinite(samples).all():
            raise InputError("audio clip contains non-finite samples")
        if self.sample_rate <= 0:
            raise InputError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class LogMelFrame:
    coefficients: np.ndarray  # [n_mels] float32
    frame_index: int
    hop: int


@dataclass(frozen=True)
class Codebook:
    """One ensemble member's centroid table."""

    centroids: np.ndarray  # [K, D] float32
    ensemble_id: int

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 1:
            raise InputError("centroids must be a non-empty [K, D] matrix")
        if c.shape[0] > 1:
            d2 = _pairwise_sq(c.astype(np.float64), c.astype(np.float64))
            np.fill_diagonal(d2, np.inf)
            if d2.min() <= 1e-12:  # squared tolerance, distinct within 1e-6
                raise DataError("codebook contains duplicate centroids")
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class CodebookSet:
    """All ensemble members plus the shared residual basis and step size."""

    members: tuple
    residual_basis: np.ndarray  # [_RESIDUAL_RANK, D] float32, orthonormal rows
    residual_step: float

    def __post_init__(self):
        basis = np.ascontiguousarray(self.residual_basis, dtype=np.float32)
        if basis.shape != (_RESIDUAL_RANK, self.members[0].centroids.shape[1]):
            raise InputError("residual basis shape does not match the codebooks")
        if self.residual_step <= 0:
            raise InputError("residual step must be positive")
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "residual_basis", basis)

    @property
    def feature_dim(self) -> int:
        return self.members[0].centroids.shape[1]


@dataclass(frozen=True)
class AudioTokenStream:
    """C_au: per pooled window, one index per ensemble member plus a residual."""

    semantic_tokens: np.ndarray  # [n_tokens, ensemble_size] int64
    residual_tokens: np.ndarray  # [n_tokens] int64
    tokens_per_second: int

    def __post_init__(self):
        sem = np.ascontiguousarray(self.semantic_tokens, dtype=np.int64)
        res = np.ascontiguousarray(self.residual_tokens, dtype=np.int64)
        if sem.ndim != 2:
            raise InputError("semantic tokens must be [n_tokens, ensemble_size]")
        if res.shape != (sem.shape[0],):
            raise InputError("semantic and residual streams must have equal length")
        object.__setattr__(self, "semantic_tokens", sem)
        object.__setattr__(self, "residual_tokens", res)

    @property
    def n_tokens(self) -> int:
        return self.semantic_tokens.shape[0]


def _pairwise_sq(x, c):
    """Squared Euclidean distances [n, K] between rows of x and rows of c."""
    return np.maximum(
        (x * x).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :] - 2.0 * (x @ c.T),
        0.0,
    )


def _stack(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        arr = np.ascontiguousarray(frames, dtype=np.float32)
        if arr.ndim != 2:
            raise InputError("feature array must be [n_frames, n_mels]")
        return arr
    return np.stack([f.coefficients for f in frames]).astype(np.float32)


def mel_filterbank(sample_rate, n_fft, n_mels) -> np.ndarray:
    """Triangular mel filters [n_mels, n_fft//2+1], unit peak per band."""
    mel = lambda hz: 2595.0 * np.log10(1.0 + hz / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    points_hz = inv(np.linspace(mel(0.0), mel(sample_rate / 2.0), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    bank = np.zeros((n_mels, bin_hz.size), dtype=np.float64)
    for i in range(n_mels):
        lo, mid, hi = points_hz[i], points_hz[i + 1], points_hz[i + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return bank.astype(np.float32)


def mel_band_centers_hz(sample_rate, n_mels) -> np.ndarray:
    """Peak frequency of each triangular band."""
    mel = lambda hz: 2595.0 * np.log10(1.0 + hz / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return inv(np.linspace(mel(0.0), mel(sample_rate / 2.0), n_mels + 2))[1:-1]


def log_mel(clip: AudioClip, n_fft=N_FFT, hop=HOP, n_mels=N_MELS):
    """Log mel-energy frames; count = floor((len - n_fft)/hop) + 1, no padding."""
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise InputError("n_fft must be a power of two")
    if not 1 <= hop <= n_fft:
        raise InputError("hop must lie in [1, n_fft]")
    n = clip.samples.size
    if n < n_fft:
        raise InputError(f"clip of {n} samples is shorter than one {n_fft}-sample window")
    n_frames = (n - n_fft) // hop + 1
    window = np.hanning(n_fft).astype(np.float64)
    starts = np.arange(n_frames) * hop
    segs = clip.samples[starts[:, None] + np.arange(n_fft)[None, :]].astype(np.float64)
    power = np.abs(np.fft.rfft(segs * window, axis=1)) ** 2
    bank = mel_filterbank(clip.sample_rate, n_fft, n_mels).astype(np.float64)
    feats = np.log(power @ bank.T + _MEL_FLOOR).astype(np.float32)
    return [LogMelFrame(feats[i], i, hop) for i in range(n_frames)]


def _lloyd(x, k, rng):
    """Lloyd's k-means; returns (centroids, per-iteration WCSS history)."""
    n = x.shape[0]
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    history = []
    for _ in range(100):
        d2 = _pairwise_sq(x, centroids)
        assign = d2.argmin(axis=1)  # argmin ties break to the lowest index
        dist = d2[np.arange(n), assign]
        history.append(float(dist.sum()))
        far = iter(np.argsort(-dist))  # distinct repair points for empty clusters
        for j in range(k):
            mask = assign == j
            centroids[j] = x[mask].mean(axis=0) if mask.any() else x[next(far)]
        if len(history) >= 2 and history[-2] - history[-1] < 1e-6 * max(history[-2], 1e-30):
            break
    return centroids, history


def fit_semantic_codebooks(features, k, ensemble_size=ENSEMBLE_SIZE, seed=0):
    """Fit one k-means codebook per ensemble member from distinct seeded starts."""
    x = _stack(features).astype(np.float64)
    if np.unique(x, axis=0).shape[0] < k:
        raise InputError(f"need at least {k} distinct feature vectors")
    books = []
    for e in range(ensemble_size):
        rng = rng_for(seed, f"audio.codebook{e}")
        centroids, _ = _lloyd(x, k, rng)
        books.append(Codebook(centroids.astype(np.float32), e))
    return books


def fit_residual_basis(features, codebook0: Codebook, residual_levels=RESIDUAL_LEVELS):
    """Basis and step for the residual quantizer, fit on member-0 residuals.

    Rows are the leading right singular vectors of the residual matrix; the
    step is chosen so the quantizer extremes hit the largest projection seen.
    """
    x = _stack(features).astype(np.float64)
    d = x.shape[1]
    if d < _RESIDUAL_RANK:
        raise InputError(f"feature dimension {d} below residual basis rank {_RESIDUAL_RANK}")
    c = codebook0.centroids.astype(np.float64)
    resid = x - c[_pairwise_sq(x, c).argmin(axis=1)]
    _, _, vt = np.linalg.svd(resid, full_matrices=False)
    basis = vt[:_RESIDUAL_RANK]
    half = (_effective_levels(residual_levels) - 1) // 2
    top = float(np.abs(resid @ basis[0]).max())
    step = max(top / max(half, 1), 1e-9)
    return basis.astype(np.float32), step


def fit_tokenizer(features, k=CODEBOOK_K, ensemble_size=ENSEMBLE_SIZE, seed=0,
                  residual_levels=RESIDUAL_LEVELS) -> CodebookSet:
    books = fit_semantic_codebooks(features, k, ensemble_size, seed)
    basis, step = fit_residual_basis(features, books[0], residual_levels)
    return CodebookSet(tuple(books), basis, step)


def _effective_levels(residual_levels):
    """Largest odd level count <= the request, so zero is exactly a level."""
    if residual_levels < 2:
        raise InputError("residual quantizer needs at least 2 levels")
    return residual_levels - 1 if residual_levels % 2 == 0 else residual_levels


def nearest_centroid(features, codebook: Codebook) -> np.ndarray:
    """Index of the closest centroid per row; ties break to the lowest index."""
    x = _stack(features).astype(np.float64)
    return _pairwise_sq(x, codebook.centroids.astype(np.float64)).argmin(axis=1)


def token_spans(n_frames, feature_rate, tokens_per_second) -> np.ndarray:
    """Pooling boundaries: token j covers feature frames [b[j], b[j+1])."""
    if tokens_per_second <= 0:
        raise InputError("tokens_per_second must be positive")
    if tokens_per_second > feature_rate:
        raise InputError("tokens_per_second exceeds the feature frame rate")
    per = feature_rate / tokens_per_second
    n_tokens = max(1, math.ceil(n_frames / per))
    bounds = np.minimum(np.round(np.arange(n_tokens + 1) * per).astype(np.int64), n_frames)
    bounds[-1] = n_frames
    return np.unique(bounds)  # rounding can pinch the last window shut


def tokenize(clip: AudioClip, codebooks: CodebookSet, residual_levels=RESIDUAL_LEVELS,
             tokens_per_second=4, n_fft=N_FFT, hop=HOP) -> AudioTokenStream:
    """Quantize a clip into semantic + residual indices at the requested rate."""
    frames = log_mel(clip, n_fft, hop, codebooks.feature_dim)
    x = _stack(frames).astype(np.float64)
    bounds = token_spans(x.shape[0], clip.sample_rate / hop, tokens_per_second)
    pooled = np.stack([x[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])
    sem = np.stack([nearest_centroid(pooled.astype(np.float32), cb) for cb in codebooks.members], axis=1)
    resid = pooled - codebooks.members[0].centroids.astype(np.float64)[sem[:, 0]]
    proj = resid @ codebooks.residual_basis[0].astype(np.float64)
    half = (_effective_levels(residual_levels) - 1) // 2
    q = np.clip(np.round(proj / codebooks.residual_step), -half, half).astype(np.int64) + half
    return AudioTokenStream(sem, q, tokens_per_second)


def detokenize(stream: AudioTokenStream, codebooks: CodebookSet,
               residual_levels=RESIDUAL_LEVELS) -> np.ndarray:
    """Conditioning features [n_tokens, ensemble_size*D]: concatenated member
    centroids with the dequantized residual added to the member-0 block."""
    sem = stream.semantic_tokens
    if sem.shape[1] != len(codebooks.members):
        raise DataError("token stream ensemble width does not match the codebooks")
    eff = _effective_levels(residual_levels)
    half = (eff - 1) // 2
    if sem.min(initial=0) < 0 or stream.residual_tokens.min(initial=0) < 0:
        raise DataError("negative token index")
    if (stream.residual_tokens >= eff).any():
        raise DataError("residual token index out of range")
    blocks = []
    for e, cb in enumerate(codebooks.members):
        if (sem[:, e] >= cb.k).any():
            raise DataError(f"semantic token out of range for ensemble member {e}")
        blocks.append(cb.centroids[sem[:, e]].astype(np.float32))
    levels = (stream.residual_tokens - half).astype(np.float32) * np.float32(codebooks.residual_step)
    blocks[0] = blocks[0] + levels[:, None] * codebooks.residual_basis[0][None, :]
    return np.concatenate(blocks, axis=1)


def save_codebooks(path, codebooks: CodebookSet) -> None:
    """AVCB file: magic, version, ensemble u8, K u32, D u32, centroid data per
    member, residual basis, residual step."""
    k = codebooks.members[0].k
    d = codebooks.feature_dim
    parts = [b"AVCB", struct.pack("<HBII", 1, len(codebooks.members), k, d)]
    for cb in codebooks.members:
        if cb.k != k:
            raise InputError("all ensemble members must share one codebook size")
        parts.append(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(codebooks.residual_basis, dtype="<f4").tobytes())
    parts.append(struct.pack("<f", codebooks.residual_step))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_codebooks(path) -> CodebookSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"AVCB":
        raise FormatError("not a codebook file (bad magic)")
    if len(blob) < 15:
        raise CorruptionError("codebook file truncated in header")
    version, ensemble, k, d = struct.unpack("<HBII", blob[4:15])
    if version != 1:
        raise FormatError(f"unsupported codebook version {version}")
    need = 15 + 4 * (ensemble * k * d + _RESIDUAL_RANK * d) + 4
    if len(blob) < need:
        raise CorruptionError("codebook file truncated")
    if len(blob) > need:
        raise CorruptionError("codebook file has trailing bytes")
    pos = 15
    members = []
    for e in range(ensemble):
        size = 4 * k * d
        cent = np.frombuffer(blob, dtype="<f4", count=k * d, offset=pos).reshape(k, d)
        members.append(Codebook(cent.copy(), e))
        pos += size
    basis = np.frombuffer(blob, dtype="<f4", count=_RESIDUAL_RANK * d, offset=pos)
    pos += 4 * _RESIDUAL_RANK * d
    (step,) = struct.unpack("<f", blob[pos : pos + 4])
    return CodebookSet(tuple(members), basis.reshape(_RESIDUAL_RANK, d).copy(), step)


def read_wav(path) -> AudioClip:
    """Load 16-bit mono PCM as float32 in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise FormatError("only mono WAV input is supported")
        if fh.getsampwidth() != 2:
            raise FormatError("only 16-bit PCM WAV input is supported")
        raw = fh.readframes(fh.getnframes())
        rate = fh.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples.astype(np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(pcm.astype("<i2").tobytes())
