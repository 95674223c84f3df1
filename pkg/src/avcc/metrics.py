"""Quality and rate-distortion metrics: PSNR, SSIM, spectral distances, BD-rate.

All functions are deterministic and symmetric where the underlying math is.
Audio distances operate on log spectrograms with the same 1e-6 additive floor
the feature extractor uses, so silence has a well-defined reference level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import HOP, N_FFT, AudioClip, log_mel
from .errors import InputError
from .video import VideoFrame

PSNR_CAP_DB = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
_LOG_FLOOR = 1e-6
_BD_SAMPLES = 1000


def _stack_frames(x) -> np.ndarray:
    frames = [f.pixels if isinstance(f, VideoFrame) else np.asarray(f, np.float64) for f in x]
    if not frames:
        raise InputError("empty frame sequence")
    return np.stack(frames).astype(np.float64)


def _paired_frames(x, y):
    a, b = _stack_frames(x), _stack_frames(y)
    if a.shape != b.shape:
        raise InputError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, y) -> float:
    """Mean per-frame 10*log10(1/MSE) on the [0,1] scale, capped at 99 dB."""
    a, b = _paired_frames(x, y)
    values = []
    for fa, fb in zip(a, b):
        mse = float(np.mean((fa - fb) ** 2))
        values.append(PSNR_CAP_DB if mse <= 0 else min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse)))
    return float(np.mean(values))


def ssim(x, y, window=8, c1=SSIM_C1, c2=SSIM_C2) -> float:
    """Mean SSIM over non-overlapping windows, frames, and channels."""
    a, b = _paired_frames(x, y)
    if window < 1 or a.shape[1] < window or a.shape[2] < window:
        raise InputError(f"window {window} does not fit frames of shape {a.shape[1:]}")
    scores = []
    for fa, fb in zip(a, b):
        for i in range(0, fa.shape[0] - window + 1, window):
            for j in range(0, fa.shape[1] - window + 1, window):
                pa = fa[i : i + window, j : j + window]
                pb = fb[i : i + window, j : j + window]
                for ch in range(pa.shape[-1]) if pa.ndim == 3 else (slice(None),):
                    wa = pa[..., ch] if pa.ndim == 3 else pa
                    wb = pb[..., ch] if pb.ndim == 3 else pb
                    mu_a, mu_b = wa.mean(), wb.mean()
                    va, vb = wa.var(), wb.var()
                    cov = ((wa - mu_a) * (wb - mu_b)).mean()
                    scores.append(
                        ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
                    )
    return float(np.mean(scores))


def _paired_audio(a: AudioClip, b: AudioClip):
    if a.sample_rate != b.sample_rate:
        raise InputError(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")
    if len(a.samples) != len(b.samples):
        raise InputError(f"lengths differ: {len(a.samples)} vs {len(b.samples)}")


def mel_distance(a: AudioClip, b: AudioClip, n_fft=N_FFT, hop=HOP) -> float:
    """Mean absolute difference between log-mel spectrograms."""
    _paired_audio(a, b)
    ma = np.stack([f.coefficients for f in log_mel(a, n_fft=n_fft, hop=hop)])
    mb = np.stack([f.coefficients for f in log_mel(b, n_fft=n_fft, hop=hop)])
    return float(np.mean(np.abs(ma.astype(np.float64) - mb.astype(np.float64))))


def _log_stft(clip: AudioClip, n_fft, hop) -> np.ndarray:
    samples = np.asarray(clip.samples, np.float64)
    n = 1 + (len(samples) - n_fft) // hop if len(samples) >= n_fft else 0
    if n == 0:
        raise InputError(f"clip shorter than one {n_fft}-sample analysis window")
    window = np.hanning(n_fft)
    frames = np.stack([samples[i * hop : i * hop + n_fft] * window for i in range(n)])
    return np.log(np.abs(np.fft.rfft(frames, axis=1)) + _LOG_FLOOR)


def stft_distance(a: AudioClip, b: AudioClip, n_fft=N_FFT, hop=HOP) -> float:
    """Mean absolute difference between log-magnitude STFTs."""
    _paired_audio(a, b)
    return float(np.mean(np.abs(_log_stft(a, n_fft, hop) - _log_stft(b, n_fft, hop))))


# -- BD-rate ----------------------------------------------------------------------


def _as_curve(points) -> np.ndarray:
    curve = np.asarray([(float(r), float(q)) for r, q in points], np.float64)
    if curve.shape[0] < 4:
        raise InputError(f"BD-rate needs at least 4 points, got {curve.shape[0]}")
    if np.any(curve[:, 0] <= 0):
        raise InputError("rates must be positive")
    curve = curve[np.argsort(curve[:, 1])]
    if np.any(np.diff(curve[:, 1]) <= 0):
        raise InputError("qualities must be distinct")
    return curve


def _natural_cubic(x, y):
    """Second derivatives of the natural cubic spline through (x, y)."""
    n = len(x)
    h = np.diff(x)
    # tridiagonal system for interior second derivatives, natural boundaries
    diag = 2.0 * (h[:-1] + h[1:])
    rhs = 6.0 * (np.diff(y[1:]) / h[1:] - np.diff(y[:-1]) / h[:-1])
    m = np.zeros(n)
    if n > 2:
        lower = h[1:-1].copy()
        upper = h[1:-1].copy()
        d = diag.copy()
        r = rhs.copy()
        for i in range(1, len(d)):
            w = lower[i - 1] / d[i - 1]
            d[i] -= w * upper[i - 1]
            r[i] -= w * r[i - 1]
        sol = np.zeros(len(d))
        sol[-1] = r[-1] / d[-1]
        for i in range(len(d) - 2, -1, -1):
            sol[i] = (r[i] - upper[i] * sol[i + 1]) / d[i]
        m[1:-1] = sol
    return m


def _spline_eval(x, y, m, t):
    idx = np.clip(np.searchsorted(x, t) - 1, 0, len(x) - 2)
    h = x[idx + 1] - x[idx]
    u = t - x[idx]
    v = x[idx + 1] - t
    return (
        m[idx] * v**3 / (6 * h)
        + m[idx + 1] * u**3 / (6 * h)
        + (y[idx] / h - m[idx] * h / 6) * v
        + (y[idx + 1] / h - m[idx + 1] * h / 6) * u
    )


def bd_rate(curve_a, curve_b) -> float:
    """Bjontegaard delta rate of curve_b relative to curve_a, in percent.

    Curves are (rate_kbps, quality) point sets; log10(rate) is interpolated
    with a natural cubic spline over quality and averaged by trapezoidal
    integration across the overlapping quality interval.
    """
    a, b = _as_curve(curve_a), _as_curve(curve_b)
    lo = max(a[0, 1], b[0, 1])
    hi = min(a[-1, 1], b[-1, 1])
    if hi <= lo:
        raise InputError(f"quality ranges do not overlap: [{a[0,1]}, {a[-1,1]}] vs [{b[0,1]}, {b[-1,1]}]")
    ya, yb = np.log10(a[:, 0]), np.log10(b[:, 0])
    ma, mb = _natural_cubic(a[:, 1], ya), _natural_cubic(b[:, 1], yb)
    t = np.linspace(lo, hi, _BD_SAMPLES)
    diff = _spline_eval(b[:, 1], yb, mb, t) - _spline_eval(a[:, 1], ya, ma, t)
    area = float((0.5 * (diff[0] + diff[-1]) + diff[1:-1].sum()) * (t[1] - t[0]))
    avg = area / (hi - lo)
    return (10.0**avg - 1.0) * 100.0


# -- association ------------------------------------------------------------------


@dataclass(frozen=True)
class SignTestResult:
    concordant: int
    n: int
    p_value: float


def quadrant_sign_test(x, y) -> SignTestResult:
    """One-sided sign test for positive association via median quadrants.

    Counts points falling in the (+,+) or (-,-) quadrant around the sample
    medians; ties on either median are dropped. The p-value is the exact
    binomial tail P[Bin(n, 1/2) >= concordant].
    """
    u = np.asarray(x, np.float64)
    v = np.asarray(y, np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise InputError(f"paired 1-D samples required, got {u.shape} and {v.shape}")
    prod = (u - np.median(u)) * (v - np.median(v))
    active = prod != 0
    n = int(active.sum())
    k = int((prod[active] > 0).sum())
    p = sum(math.comb(n, j) for j in range(k, n + 1)) / 2.0**n if n else 1.0
    return SignTestResult(concordant=k, n=n, p_value=float(p))
