"""Command-line front end: corpus generation, training, codec runs, evaluation.

Codec subcommands take flags, training takes a config file.  Every subcommand
accepts ``--json``; the machine-readable report then goes to stdout and the
human-readable text moves to stderr so pipelines stay parseable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .audio import read_wav, write_wav
from .codec import load_bundle
from .codec import decode_clip, encode_clip
from .container import inspect as inspect_container
from .container import measure_bitrate
from .corpus import gen_corpus, load_corpus
from .errors import (
    AvccError,
    CapabilityError,
    DataError,
    InputError,
    NumericError,
)
from .evaluate import (
    ablation_run,
    correlation_by_band,
    format_table,
    rd_surface,
)
from .metrics import bd_rate, mel_distance, psnr, ssim, stft_distance
from .train import TrainConfig, load_config, train
from .video import export_png, read_avraw, write_avraw

_SURFACE_COLUMNS = ("label", "bitrate_kbps", "psnr_db", "sync_score", "mel_distance")


def exit_code_for(exc: Exception) -> int:
    if isinstance(exc, NumericError):
        return 5
    if isinstance(exc, CapabilityError):
        return 4
    if isinstance(exc, (DataError, OSError)):
        return 3
    return 2


def _jsonify(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if dataclasses.is_dataclass(value):
        return dataclasses.asdict(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


# -- subcommand handlers ----------------------------------------------------------


def _cmd_gen_corpus(args, say) -> dict:
    manifest = gen_corpus(args.out_dir, args.clips, seed=args.seed,
                          duration_s=args.duration_s, fps=args.fps,
                          sample_rate=args.sample_rate)
    say(f"wrote {args.clips} clips to {args.out_dir} (manifest {manifest.name})")
    return {"command": "gen-corpus", "out_dir": str(args.out_dir),
            "clips": args.clips, "manifest": str(manifest)}


def _cmd_train(args, say) -> dict:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    clips = load_corpus(args.corpus_dir)
    say(f"training on {len(clips)} clips for {config.steps} steps (seed {config.seed})")
    report = train(clips, args.model_dir, config)
    say(f"saved models to {report.out_dir}")
    say(f"sync discrimination after pretraining: {report.sync_accuracy:.3f}")
    return {"command": "train", "model_dir": str(report.out_dir),
            "log": str(report.log_path), "steps": config.steps,
            "sync_accuracy": report.sync_accuracy}


def _cmd_encode(args, say) -> dict:
    frames, fps = read_avraw(args.video)
    clip = read_wav(args.audio)
    bundle = load_bundle(args.model_dir)
    blob = encode_clip(frames, clip, bundle, fps=fps, pose_bits=args.pose_bits,
                       tokens_per_second=args.tokens_per_second)
    Path(args.out).write_bytes(blob)
    report = measure_bitrate(blob)
    rates = {"header": report.header_kbps, "identity": report.identity_kbps,
             "pose": report.pose_kbps, "audio": report.audio_kbps}
    for name, n in report.section_bytes.items():
        say(f"{name:<9} {n:>7} B  {rates[name]:8.3f} kbps")
    total = sum(report.section_bytes.values())
    say(f"{'total':<9} {total:>7} B  {report.total_kbps:8.3f} kbps  "
        f"({report.duration:.2f} s)")
    return {"command": "encode", "out": str(args.out),
            "section_bytes": dict(report.section_bytes),
            "kbps": {**rates, "total": report.total_kbps},
            "duration_s": report.duration}


def _cmd_decode(args, say) -> dict:
    blob = Path(args.container).read_bytes()
    bundle = load_bundle(args.model_dir)
    result = decode_clip(blob, bundle, seed=args.seed, impute=args.impute)
    stem = Path(args.out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    outputs = []
    if result.frames:
        video_path = stem.with_suffix(".avraw")
        write_avraw(video_path, result.frames, result.meta.fps)
        outputs.append(str(video_path))
        for frame in result.frames:
            png = stem.parent / f"{stem.name}_f{frame.frame_index:04d}.png"
            export_png(frame, png)
            outputs.append(str(png))
    audio_path = stem.with_suffix(".wav")
    write_wav(audio_path, result.audio)
    outputs.append(str(audio_path))
    say(f"decoded {len(result.frames)} frames, {result.audio.samples.size} samples"
        + (f" (imputed {result.imputed})" if result.imputed else ""))
    say(f"wrote {len(outputs)} files under {stem.parent}")
    return {"command": "decode", "frames": len(result.frames),
            "audio_samples": int(result.audio.samples.size),
            "imputed": result.imputed, "outputs": outputs}


def _read_curve(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "bitrate_kbps" not in cols or "quality" not in cols:
            raise DataError(f"{path}: curve CSV needs bitrate_kbps and quality columns")
        return [(float(row["bitrate_kbps"]), float(row["quality"])) for row in reader]


def _cmd_eval(args, say) -> dict:
    if not (args.video or args.audio or args.bd_rate):
        raise InputError("eval needs at least one of --video, --audio, --bd-rate")
    report: dict = {"command": "eval"}
    if args.video:
        ref, _ = read_avraw(args.video[0])
        test, _ = read_avraw(args.video[1])
        report["psnr_db"] = psnr(ref, test)
        report["ssim"] = ssim(ref, test)
        say(f"psnr_db {report['psnr_db']:.3f}")
        say(f"ssim    {report['ssim']:.4f}")
    if args.audio:
        ref, test = read_wav(args.audio[0]), read_wav(args.audio[1])
        report["mel_distance"] = mel_distance(ref, test)
        report["stft_distance"] = stft_distance(ref, test)
        say(f"mel_distance  {report['mel_distance']:.4f}")
        say(f"stft_distance {report['stft_distance']:.4f}")
    if args.bd_rate:
        curve_a, curve_b = (_read_curve(p) for p in args.bd_rate)
        report["bd_rate_percent"] = bd_rate(curve_a, curve_b)
        say(f"bd_rate {report['bd_rate_percent']:+.3f}%")
    return report


def _cmd_ablate(args, say) -> dict:
    clips = load_corpus(args.corpus_dir)
    bundle_on = load_bundle(args.model_on)
    bundle_off = load_bundle(args.model_off)
    rows = ablation_run(clips, bundle_on, bundle_off, tps_list=tuple(args.tokens_per_second),
                        pose_bits=args.pose_bits, seed=args.seed, csv_path=args.out)
    say(format_table(rows))
    if args.out:
        say(f"wrote {args.out}")
    return {"command": "ablate", "rows": rows,
            "out": str(args.out) if args.out else None}


def _cmd_rd_surface(args, say) -> dict:
    clips = load_corpus(args.corpus_dir)
    bundle = load_bundle(args.model_dir)
    surface = rd_surface(clips, bundle, pose_bits_list=tuple(args.pose_bits),
                         tps_list=tuple(args.tokens_per_second), seed=args.seed,
                         out_dir=args.out_dir)
    rows = []
    for key in sorted(surface.cells):
        cell = surface.cells[key]
        rows.append({"label": cell.label, "bitrate_kbps": cell.bitrate_kbps,
                     "psnr_db": cell.video["psnr_db"],
                     "sync_score": cell.audio["sync_score"],
                     "mel_distance": -cell.audio["neg_mel_distance"]})
    say(format_table(rows, _SURFACE_COLUMNS))
    bands = [{"kbps": k, "corr": r, "clips": n}
             for k, r, n in correlation_by_band(surface)]
    for band in bands:
        say(f"band {band['kbps']:.3f} kbps: corr(psnr, audio quality) = "
            f"{band['corr']:+.3f} over {band['clips']} points")
    say(f"wrote surface files to {args.out_dir}")
    return {"command": "rd-surface", "out_dir": str(args.out_dir),
            "cells": rows, "bands": bands}


def _cmd_inspect(args, say) -> dict:
    blob = Path(args.container).read_bytes()
    info = inspect_container(blob)
    width = max(len(k) for k in info)
    for key, value in info.items():
        say(f"{key:<{width}}  {value}")
    return {"command": "inspect", **info}


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avcc",
                                     description="joint audio-video generative codec")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--json", action="store_true",
                       help="write a JSON report to stdout (text moves to stderr)")
        return p

    p = add("gen-corpus", _cmd_gen_corpus, "render a synthetic audio-video corpus")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-s", type=float, default=1.6)
    p.add_argument("--fps", type=float, default=12.5)
    p.add_argument("--sample-rate", type=int, default=16000)

    p = add("train", _cmd_train, "train codec models on a corpus directory")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("model_dir", type=Path)
    p.add_argument("--config", type=Path, default=None,
                   help="key=value training config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")

    p = add("encode", _cmd_encode, "encode an .avraw/.wav pair into a container")
    p.add_argument("video", type=Path)
    p.add_argument("audio", type=Path)
    p.add_argument("model_dir", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--pose-bits", type=int, default=6)
    p.add_argument("--tokens-per-second", type=int, default=4)

    p = add("decode", _cmd_decode, "reconstruct video and audio from a container")
    p.add_argument("container", type=Path)
    p.add_argument("model_dir", type=Path)
    p.add_argument("out_stem", type=Path,
                   help="output stem; writes <stem>.avraw, <stem>_fNNNN.png, <stem>.wav")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--impute", choices=("audio", "video"), default=None,
                   help="drop this modality's code and reconstruct it cross-modally")

    p = add("eval", _cmd_eval, "compare reconstructions or BD-rate curves")
    p.add_argument("--video", nargs=2, metavar=("REF", "TEST"), type=Path)
    p.add_argument("--audio", nargs=2, metavar=("REF", "TEST"), type=Path)
    p.add_argument("--bd-rate", nargs=2, metavar=("CURVE_A", "CURVE_B"), type=Path,
                   help="CSV files with bitrate_kbps and quality columns")

    p = add("ablate", _cmd_ablate, "cross-attention on/off comparison table")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("model_on", type=Path)
    p.add_argument("model_off", type=Path)
    p.add_argument("--tokens-per-second", type=int, nargs="+", default=[2, 4, 8])
    p.add_argument("--pose-bits", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="also write rows as CSV")

    p = add("rd-surface", _cmd_rd_surface, "rate grid sweep with correlation bands")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("model_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--pose-bits", type=int, nargs="+", default=[2, 4, 6, 8])
    p.add_argument("--tokens-per-second", type=int, nargs="+", default=[2, 4, 8])
    p.add_argument("--seed", type=int, default=0)

    p = add("inspect", _cmd_inspect, "dump container header fields and section sizes")
    p.add_argument("container", type=Path)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = sys.stderr if args.json else sys.stdout

    def say(text):
        print(text, file=out)

    try:
        report = args.func(args, say)
    except (AvccError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"command": args.command, "error": str(exc),
                              "exit_code": code}))
        return code
    if args.json:
        print(json.dumps(report, indent=2, default=_jsonify))
    return 0


if __name__ == "__main__":
    sys.exit(main())
