"""Synthetic talking-head corpus.

Each clip is a cartoon face whose mouth opening and audio loudness are driven
by one shared control signal a(t), a normalized sum of seeded sinusoids.  That
shared driver is the ground-truth cross-modal coupling the rest of the
pipeline is trained and evaluated on.  Each modality also carries its own
nuisance (horizontal head sway on video, a noise floor on audio) so the
coupling is not a pixel-level identity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .audio import AudioClip, read_wav, write_wav
from .errors import DataError, InputError
from .losses import MOUTH_COLS, MOUTH_ROWS
from .video import VideoFrame, read_avraw, write_avraw

FRAME_SIZE = 64
_N_COMPONENTS = 3
_N_HARMONICS = 3
_APERTURE_GRID = 2048
_MOUTH_ROW, _MOUTH_COL = 48.0, 32.0
_MOUTH_RX = 6.5
_DARK_LUMA = 0.45  # mouth pixels sit below this, skin stays above

MANIFEST_NAME = "manifest.csv"


@dataclass(frozen=True)
class SyntheticClipSpec:
    """Complete recipe for one clip; rendering is a pure function of this."""

    name: str
    seed: int
    duration_s: float
    fps: float
    sample_rate: int
    size: int
    f0_hz: float
    a_freqs_hz: tuple
    a_weights: tuple
    a_phases: tuple
    harmonic_phases: tuple
    sway_px: float
    sway_freq_hz: float
    sway_phase: float
    noise_level: float
    skin_rgb: tuple
    mouth_rgb: tuple
    bg_rgb: tuple

    def __post_init__(self):
        if self.duration_s <= 0 or self.fps <= 0 or self.sample_rate <= 0:
            raise InputError("clip timing parameters must be positive")
        if self.size < 64:
            raise InputError("frames smaller than 64 px cannot hold the face layout")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.fps))

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


def clip_spec(seed, name=None, duration_s=1.6, fps=12.5, sample_rate=16000,
              size=FRAME_SIZE) -> SyntheticClipSpec:
    """Draw a clip recipe from the seed."""
    rng = np.random.default_rng(seed)
    f0 = float(rng.uniform(110.0, 220.0))
    freqs = tuple(float(v) for v in rng.uniform(0.6, 2.8, _N_COMPONENTS))
    weights = tuple(float(v) for v in rng.uniform(0.4, 1.0, _N_COMPONENTS))
    phases = tuple(float(v) for v in rng.uniform(0.0, 2.0 * np.pi, _N_COMPONENTS))
    harm = tuple(float(v) for v in rng.uniform(0.0, 2.0 * np.pi, _N_HARMONICS))
    sway = float(rng.uniform(0.5, 2.0))
    sway_freq = float(rng.uniform(0.3, 1.1))
    sway_phase = float(rng.uniform(0.0, 2.0 * np.pi))
    noise = float(rng.uniform(0.002, 0.004))
    skin = tuple(float(v) for v in rng.uniform([0.70, 0.55, 0.45], [0.90, 0.75, 0.65]))
    mouth = tuple(float(v) for v in rng.uniform([0.10, 0.02, 0.02], [0.25, 0.10, 0.10]))
    bg = tuple(float(v) for v in rng.uniform([0.15, 0.20, 0.30], [0.35, 0.40, 0.55]))
    return SyntheticClipSpec(
        name=name or f"clip_{seed}",
        seed=int(seed),
        duration_s=float(duration_s),
        fps=float(fps),
        sample_rate=int(sample_rate),
        size=int(size),
        f0_hz=f0,
        a_freqs_hz=freqs,
        a_weights=weights,
        a_phases=phases,
        harmonic_phases=harm,
        sway_px=sway,
        sway_freq_hz=sway_freq,
        sway_phase=sway_phase,
        noise_level=noise,
        skin_rgb=skin,
        mouth_rgb=mouth,
        bg_rgb=bg,
    )


def _raw_aperture(spec: SyntheticClipSpec, t: np.ndarray) -> np.ndarray:
    s = np.zeros_like(t, dtype=np.float64)
    for f, w, p in zip(spec.a_freqs_hz, spec.a_weights, spec.a_phases):
        s += w * np.sin(2.0 * np.pi * f * t + p)
    return s


def aperture(spec: SyntheticClipSpec, t) -> np.ndarray:
    """The shared control signal a(t) in [0, 1].

    Normalized by the peak magnitude over the clip so every clip exercises a
    wide aperture range regardless of how its sinusoids interfere.
    """
    t = np.asarray(t, dtype=np.float64)
    grid = np.linspace(0.0, spec.duration_s, _APERTURE_GRID)
    peak = np.abs(_raw_aperture(spec, grid)).max()
    return np.clip(0.5 + 0.5 * _raw_aperture(spec, t) / peak, 0.0, 1.0)


def _ellipse(yy, xx, cy, cx, ry, rx):
    """Soft-edged inclusion mask; edge softness keeps area continuous in ry."""
    q = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return np.clip((1.0 - q) * 3.0 + 0.5, 0.0, 1.0)


def _compose(base, mask, color):
    return base * (1.0 - mask[:, :, None]) + mask[:, :, None] * np.asarray(color)


def render_video(spec: SyntheticClipSpec):
    """Rasterize the face; mouth height tracks a(t), the head sways sideways."""
    n = spec.n_frames
    times = (np.arange(n) + 0.5) / spec.fps  # frame i depicts its display interval's center
    a = aperture(spec, times)
    sway = spec.sway_px * np.sin(2.0 * np.pi * spec.sway_freq_hz * times + spec.sway_phase)
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)

    grad = np.linspace(0.9, 1.1, spec.size)[:, None, None]
    background = np.asarray(spec.bg_rgb)[None, None, :] * grad

    frames = []
    for i in range(n):
        cx = spec.size / 2.0 + sway[i]
        img = _compose(background, _ellipse(yy, xx, 34.0, cx, 29.0, 24.0), spec.skin_rgb)
        for ex in (-8.0, 8.0):
            img = _compose(img, _ellipse(yy, xx, 24.0, cx + ex, 2.2, 2.8), (0.08, 0.08, 0.1))
        ry = 1.0 + 6.5 * a[i]
        img = _compose(img, _ellipse(yy, xx, _MOUTH_ROW, _MOUTH_COL + sway[i], ry, _MOUTH_RX),
                       spec.mouth_rgb)
        frames.append(VideoFrame(np.clip(img, 0.0, 1.0).astype(np.float32), i))
    return frames


def render_audio(spec: SyntheticClipSpec) -> AudioClip:
    """Harmonic tone at f0 whose amplitude envelope follows a(t)."""
    t = np.arange(spec.n_samples) / spec.sample_rate
    a = aperture(spec, t)
    tone = np.zeros_like(t)
    for h in range(1, _N_HARMONICS + 1):
        tone += (0.5 / h) * np.sin(2.0 * np.pi * h * spec.f0_hz * t + spec.harmonic_phases[h - 1])
    rng = np.random.default_rng(spec.seed + 1)
    samples = (0.06 + 0.9 * a) * tone * 0.55 + rng.normal(0.0, spec.noise_level, t.size)
    return AudioClip(np.clip(samples, -1.0, 1.0).astype(np.float32), spec.sample_rate)


def render_clip(spec: SyntheticClipSpec):
    return render_video(spec), render_audio(spec)


# -- ground-truth measurements ------------------------------------------------


def mouth_row_height(frame: VideoFrame) -> int:
    """Count of mouth-crop rows containing a dark pixel."""
    crop = frame.pixels[MOUTH_ROWS, MOUTH_COLS, :]
    luma = crop.mean(axis=2)
    return int((luma.min(axis=1) < _DARK_LUMA).sum())


def audio_rms_per_frame(clip: AudioClip, fps: float) -> np.ndarray:
    """RMS level over each video-frame-aligned sample window."""
    n = int(round(clip.samples.size / clip.sample_rate * fps))
    if n < 1:
        raise InputError("clip shorter than one video frame")
    bounds = np.round(np.arange(n + 1) * clip.samples.size / n).astype(np.int64)
    x = clip.samples.astype(np.float64)
    return np.array([np.sqrt(np.mean(x[a:b] ** 2)) for a, b in zip(bounds[:-1], bounds[1:])])


def coupling_correlation(frames, clip: AudioClip, fps: float) -> float:
    """Pearson r between per-frame mouth height and audio RMS."""
    heights = np.array([mouth_row_height(f) for f in frames], dtype=np.float64)
    rms = audio_rms_per_frame(clip, fps)
    if heights.size != rms.size:
        raise InputError("frame count and audio window count disagree")
    return float(np.corrcoef(heights, rms)[0, 1])


# -- corpus directory ----------------------------------------------------------

_VEC_FIELDS = ("a_freqs_hz", "a_weights", "a_phases", "harmonic_phases",
               "skin_rgb", "mouth_rgb", "bg_rgb")
_INT_FIELDS = ("seed", "sample_rate", "size")


def _manifest_row(spec: SyntheticClipSpec) -> dict:
    row = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        row[f.name] = "|".join(repr(x) for x in v) if f.name in _VEC_FIELDS else v
    return row


def _spec_from_row(row: dict) -> SyntheticClipSpec:
    kwargs = {}
    for f in fields(SyntheticClipSpec):
        raw = row[f.name]
        if f.name in _VEC_FIELDS:
            kwargs[f.name] = tuple(float(x) for x in raw.split("|")) if raw else ()
        elif f.name in _INT_FIELDS:
            kwargs[f.name] = int(raw)
        elif f.name == "name":
            kwargs[f.name] = raw
        else:
            kwargs[f.name] = float(raw)
    return SyntheticClipSpec(**kwargs)


def gen_corpus(out_dir, n_clips, seed=0, duration_s=1.6, fps=12.5,
               sample_rate=16000, size=FRAME_SIZE) -> Path:
    """Write n_clips paired .avraw/.wav files plus the manifest; returns its path."""
    if n_clips < 0:
        raise InputError("n_clips must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    for i in range(n_clips):
        specs.append(clip_spec(seed * 1_000_003 + i, name=f"clip_{i:04d}",
                               duration_s=duration_s, fps=fps,
                               sample_rate=sample_rate, size=size))
    manifest = out / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[f.name for f in fields(SyntheticClipSpec)])
        writer.writeheader()
        for spec in specs:
            writer.writerow(_manifest_row(spec))
    for spec in specs:
        frames, clip = render_clip(spec)
        write_avraw(out / f"{spec.name}.avraw", frames, spec.fps)
        write_wav(out / f"{spec.name}.wav", clip)
    return manifest


def load_manifest(corpus_dir) -> list:
    path = Path(corpus_dir)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    with open(path, newline="") as fh:
        return [_spec_from_row(row) for row in csv.DictReader(fh)]


@dataclass(frozen=True)
class CorpusClip:
    spec: SyntheticClipSpec
    frames: tuple
    audio: AudioClip


def load_corpus(corpus_dir) -> list:
    """Read every clip named by the manifest back into memory."""
    root = Path(corpus_dir)
    out = []
    for spec in load_manifest(root):
        frames, fps = read_avraw(root / f"{spec.name}.avraw")
        if abs(fps - spec.fps) > 1e-3:
            raise DataError(f"{spec.name}: file fps {fps} disagrees with manifest {spec.fps}")
        audio = read_wav(root / f"{spec.name}.wav")
        out.append(CorpusClip(spec, tuple(frames), audio))
    return out
