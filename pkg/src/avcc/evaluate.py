"""Corpus-level evaluation: RD points, ablation tables, and RD surfaces.

Everything here measures real containers: each bitrate figure comes from
``measure_bitrate`` on bytes produced by ``encode_clip``, never from an
estimate.  Audio quality is reported as negative mel distance throughout
(labelled as such in CSV headers and plots), standing in for reference SDR.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CodecBundle, decode_clip, detokenized_mel, encode_clip, pose_route_frames
from .container import demux, measure_bitrate
from .corpus import CorpusClip
from .errors import CapabilityError, InputError
from .losses import SyncEmbedder, sync_loss
from .metrics import mel_distance, psnr
from .audio import log_mel
from .tensor import no_grad

_SYNC_FRAMES = 4
SURFACE_CSV = "rd_surface.csv"
SURFACE_CLIPS_CSV = "rd_surface_clips.csv"
SURFACE_SVG = "rd_surface.svg"
ABLATION_CSV = "ablation.csv"
ABLATION_COLUMNS = ("tokens_per_second", "variant", "bitrate_kbps", "psnr_db",
                    "sync_score", "mel_distance")


@dataclass(frozen=True)
class RDPoint:
    bitrate_kbps: float
    video: dict
    audio: dict
    label: str

    def __post_init__(self):
        if not self.bitrate_kbps > 0:
            raise InputError(f"bitrate must be positive, got {self.bitrate_kbps}")


@dataclass(frozen=True)
class ClipMetrics:
    name: str
    bitrate_kbps: float
    psnr_db: float
    sync_score: float
    mel_distance: float

    @property
    def audio_quality(self) -> float:
        return -self.mel_distance


@dataclass(frozen=True)
class RDSurface:
    pose_bits: tuple
    tokens_per_second: tuple
    cells: dict
    per_clip: dict

    def __post_init__(self):
        wanted = {(b, t) for b in self.pose_bits for t in self.tokens_per_second}
        if set(self.cells) != wanted or set(self.per_clip) != wanted:
            raise InputError("RD surface grid is incomplete")


def sync_score(frames, clip, embedder: SyncEmbedder) -> float:
    """Mean audio-visual cosine agreement over non-overlapping 4-frame windows."""
    pixels = np.stack([f.pixels for f in frames]).astype(np.float32)
    mel = np.stack([f.coefficients for f in log_mel(clip)]).astype(np.float32)
    ratio = embedder.frame_ratio
    scores = []
    with no_grad():
        for f0 in range(0, pixels.shape[0] - _SYNC_FRAMES + 1, _SYNC_FRAMES):
            a = int(round(f0 * ratio))
            b = min(mel.shape[0], int(round((f0 + _SYNC_FRAMES) * ratio)))
            window = mel[a:b]
            if abs(window.shape[0] - _SYNC_FRAMES * ratio) > ratio:
                continue
            scores.append(1.0 - float(sync_loss(window, pixels[f0 : f0 + _SYNC_FRAMES], embedder)))
    if not scores:
        raise InputError("no aligned audio-video windows to score")
    return float(np.mean(scores))


def clip_metrics(clip: CorpusClip, bundle: CodecBundle, *, pose_bits, tokens_per_second,
                 seed=0, impute=None) -> ClipMetrics:
    """Encode, decode, and score one clip at one rate setting."""
    blob = encode_clip(clip.frames, clip.audio, bundle, fps=clip.spec.fps,
                       pose_bits=pose_bits, tokens_per_second=tokens_per_second)
    rate = measure_bitrate(blob)
    out = decode_clip(blob, bundle, seed=seed, impute=impute)
    return ClipMetrics(
        name=clip.spec.name,
        bitrate_kbps=rate.total_kbps,
        psnr_db=psnr(out.frames, clip.frames),
        sync_score=sync_score(out.frames, out.audio, bundle.sync),
        mel_distance=mel_distance(out.audio, clip.audio),
    )


def per_clip_metrics(clips, bundle, *, pose_bits, tokens_per_second, seed=0, impute=None):
    return [clip_metrics(c, bundle, pose_bits=pose_bits, tokens_per_second=tokens_per_second,
                         seed=seed + i, impute=impute) for i, c in enumerate(clips)]


# -- ablation ---------------------------------------------------------------------


def _require_matched_variants(on: CodecBundle, off: CodecBundle):
    if not on.denoiser.cross_attention or off.denoiser.cross_attention:
        raise InputError("expected (cross-attention on, cross-attention off) checkpoints")
    same = (on.size == off.size and on.base == off.base
            and on.denoiser.d_lat == off.denoiser.d_lat
            and on.denoiser.t_steps == off.denoiser.t_steps
            and on.dictionary.directions.shape == off.dictionary.directions.shape)
    if not same:
        raise InputError("variant checkpoints differ beyond the cross-attention flag")


def ablation_run(clips, bundle_on: CodecBundle, bundle_off: CodecBundle, *,
                 tps_list=(2, 4, 8), pose_bits=6, seed=0, csv_path=None):
    """Cross-attention on/off comparison rows at matched token rates.

    Returns one row per (rate, variant) with corpus-mean bitrate, PSNR, sync
    score, and mel distance.  Bitrates of the two variants at equal rate match
    closely since conditioning never changes the coded token streams.
    """
    _require_matched_variants(bundle_on, bundle_off)
    rows = []
    for tps in tps_list:
        for variant, bundle in (("cross_attn", bundle_on), ("no_cross_attn", bundle_off)):
            results = per_clip_metrics(clips, bundle, pose_bits=pose_bits,
                                       tokens_per_second=tps, seed=seed)
            rows.append({
                "tokens_per_second": tps,
                "variant": variant,
                "bitrate_kbps": float(np.mean([r.bitrate_kbps for r in results])),
                "psnr_db": float(np.mean([r.psnr_db for r in results])),
                "sync_score": float(np.mean([r.sync_score for r in results])),
                "mel_distance": float(np.mean([r.mel_distance for r in results])),
            })
    if csv_path is not None:
        _write_csv(csv_path, ABLATION_COLUMNS, [[row[c] for c in ABLATION_COLUMNS] for row in rows])
    return rows


def format_table(rows, columns=ABLATION_COLUMNS) -> str:
    """Aligned plain-text rendering of result rows."""
    def _cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[_cell(row[c]) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in body)) if body else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


def _write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


# -- RD surface -------------------------------------------------------------------


def rd_surface(clips, bundle: CodecBundle, *, pose_bits_list=(2, 4, 6, 8),
               tps_list=(2, 4, 8), seed=0, out_dir=None) -> RDSurface:
    """Evaluate the full (pose bits, tokens/s) grid and optionally export files.

    Exports: per-cell aggregates (CSV), per-clip rows (CSV), and an SVG chart
    of the audio-video quality correlation per total-bitrate band; the audio
    quality axis is negative mel distance, as labelled.
    """
    if bundle.codebooks is None:
        raise CapabilityError("bundle has no fitted codebooks; train a model first")
    cells, per_clip = {}, {}
    for b in pose_bits_list:
        for tps in tps_list:
            results = per_clip_metrics(clips, bundle, pose_bits=b, tokens_per_second=tps, seed=seed)
            per_clip[(b, tps)] = tuple(results)
            cells[(b, tps)] = RDPoint(
                bitrate_kbps=float(np.mean([r.bitrate_kbps for r in results])),
                video={"psnr_db": float(np.mean([r.psnr_db for r in results]))},
                audio={"neg_mel_distance": float(np.mean([r.audio_quality for r in results])),
                       "sync_score": float(np.mean([r.sync_score for r in results]))},
                label=f"B={b},tps={tps}",
            )
    surface = RDSurface(tuple(pose_bits_list), tuple(tps_list), cells, per_clip)
    if out_dir is not None:
        export_surface(surface, out_dir)
    return surface


def correlation_by_band(surface: RDSurface, bands=3):
    """Pearson corr(video PSNR, audio quality) within equal-count bitrate bands.

    Returns (band center kbps, correlation, clip count) triples ordered from
    the lowest-bitrate band upward.
    """
    rows = [m for results in surface.per_clip.values() for m in results]
    rows.sort(key=lambda m: m.bitrate_kbps)
    chunks = [c for c in np.array_split(rows, bands) if len(c) >= 3]
    out = []
    for chunk in chunks:
        rate = float(np.mean([m.bitrate_kbps for m in chunk]))
        x = [m.psnr_db for m in chunk]
        y = [m.audio_quality for m in chunk]
        if np.std(x) == 0 or np.std(y) == 0:
            out.append((rate, 0.0, len(chunk)))
        else:
            out.append((rate, float(np.corrcoef(x, y)[0, 1]), len(chunk)))
    return out


def export_surface(surface: RDSurface, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cell_rows = [
        [b, t, p.bitrate_kbps, p.video["psnr_db"], p.audio["neg_mel_distance"], p.audio["sync_score"]]
        for (b, t), p in sorted(surface.cells.items())
    ]
    _write_csv(out / SURFACE_CSV,
               ("pose_bits", "tokens_per_second", "bitrate_kbps", "psnr_db",
                "audio_quality_neg_mel", "sync_score"), cell_rows)
    clip_rows = [
        [b, t, m.name, m.bitrate_kbps, m.psnr_db, m.audio_quality, m.sync_score]
        for (b, t), results in sorted(surface.per_clip.items()) for m in results
    ]
    _write_csv(out / SURFACE_CLIPS_CSV,
               ("pose_bits", "tokens_per_second", "clip", "bitrate_kbps", "psnr_db",
                "audio_quality_neg_mel", "sync_score"), clip_rows)
    svg = _surface_svg(surface)
    (out / SURFACE_SVG).write_text(svg)
    return {"cells": out / SURFACE_CSV, "clips": out / SURFACE_CLIPS_CSV, "svg": out / SURFACE_SVG}


def _surface_svg(surface: RDSurface, width=640, height=360) -> str:
    """Correlation-vs-bitrate chart as a self-contained SVG."""
    points = correlation_by_band(surface)
    left, right, top, bottom = 70, width - 20, 30, height - 50
    xs = [p[0] for p in points]
    lo, hi = min(xs), max(xs)
    span = (hi - lo) or 1.0

    def sx(v):
        return left + (v - lo) / span * (right - left)

    def sy(corr):
        return top + (1.0 - (corr + 1.0) / 2.0) * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{sy(0):.1f}" x2="{right}" y2="{sy(0):.1f}" stroke="#bbb" stroke-dasharray="4"/>',
        f'<text x="{(left + right) / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="13">'
        "total bitrate band (kbps)</text>",
        f'<text x="16" y="{(top + bottom) / 2:.0f}" font-size="13" '
        f'transform="rotate(-90 16 {(top + bottom) / 2:.0f})" text-anchor="middle">'
        "corr(video PSNR, audio quality = -mel distance)</text>",
    ]
    for label, corr in (("+1", 1.0), ("0", 0.0), ("-1", -1.0)):
        parts.append(f'<text x="{left - 8}" y="{sy(corr) + 4:.1f}" text-anchor="end" font-size="11">{label}</text>')
    coords = " ".join(f"{sx(r):.1f},{sy(c):.1f}" for r, c, _ in points)
    parts.append(f'<polyline points="{coords}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for r, c, n in points:
        parts.append(f'<circle cx="{sx(r):.1f}" cy="{sy(c):.1f}" r="4" fill="#1f77b4"/>')
        parts.append(f'<text x="{sx(r):.1f}" y="{sy(c) - 8:.1f}" text-anchor="middle" font-size="11">'
                     f"r={c:.2f} (n={n})</text>")
        parts.append(f'<text x="{sx(r):.1f}" y="{bottom + 16}" text-anchor="middle" font-size="11">{r:.2f}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# -- deterministic rate sweeps ------------------------------------------------------


def video_distortion_by_bits(clips, bundle: CodecBundle, *, pose_bits_list=(2, 4, 6, 8),
                             tokens_per_second=4):
    """Mean pixel MSE of the motion-compensated route per pose-bit width."""
    out = {}
    for bits in pose_bits_list:
        errs = []
        for clip in clips:
            blob = encode_clip(clip.frames, clip.audio, bundle, fps=clip.spec.fps,
                               pose_bits=bits, tokens_per_second=tokens_per_second)
            identity, poses, _, meta = demux(blob)
            rec = pose_route_frames(identity, poses, bundle, meta.pose_bits)
            truth = np.stack([f.pixels for f in clip.frames])
            approx = np.stack([f.pixels for f in rec])
            errs.append(float(np.mean((truth - approx) ** 2)))
        out[bits] = float(np.mean(errs))
    return out


def audio_distortion_by_tps(clips, bundle: CodecBundle, *, tps_list=(2, 4, 8), pose_bits=6):
    """Mean squared log-mel error of the detokenized audio features per rate."""
    out = {}
    for tps in tps_list:
        errs = []
        for clip in clips:
            blob = encode_clip(clip.frames, clip.audio, bundle, fps=clip.spec.fps,
                               pose_bits=pose_bits, tokens_per_second=tps)
            _, _, stream, meta = demux(blob)
            mel = np.stack([f.coefficients for f in log_mel(clip.audio)]).astype(np.float64)
            approx = detokenized_mel(stream, bundle.codebooks, mel.shape[0],
                                     sample_rate=meta.sample_rate).astype(np.float64)
            errs.append(float(np.mean((mel - approx) ** 2)))
        out[tps] = float(np.mean(errs))
    return out
