"""End-to-end training: sync pretraining, codebook fitting, the main loop.

One run owns every trainable component.  The schedule is momentum SGD under a
cosine-decayed learning rate, with the generator side and the discriminator
updated on alternating steps and the denoiser and audio latent coder updated
every step.  All randomness flows from named generator streams derived from
the config seed, so two runs with equal configs produce identical logs and
checkpoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .audio import fit_tokenizer, log_mel, tokenize
from .codec import CodecBundle, new_bundle, save_bundle, video_latents
from .corpus import load_corpus
from .diffusion import LatentPair, training_loss
from .errors import ConfigError, InputError, NumericError
from .losses import (
    EMBED_DIM,
    FeatureNet,
    LossWeights,
    adversarial_and_fm_loss,
    perceptual_loss,
    sync_loss,
    total_loss,
)
from .tensor import Tensor, concat, matmul, no_grad, rng_for
from .video import PoseCode, dequantize_coefficients, quantize_coefficients

POSE_BITS_CHOICES = (2, 4, 6, 8)
TPS_CHOICES = (2, 4, 8)
LOG_COLUMNS = ("step", "l_diff", "l_per", "l_adv_g", "l_adv_d", "l_fea", "l_sync",
               "total", "l_arec")
LOG_FILE = "loss_log.csv"
CONFIG_FILE = "config.txt"
_SYNC_WINDOW_FRAMES = 4
_AREC_BATCH = 16


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    lr_denoiser: float = 3e-3
    momentum: float = 0.9
    seed: int = 0
    cross_attention: bool = True
    dropout: float = 0.1
    t_steps: int = 200
    sync_steps: int = 600
    sync_lr: float = 1e-3
    calibrate_step: int = 0
    lambda_per: float = 1.0
    lambda_adv: float = 0.1
    lambda_fea: float = 1.0
    lambda_sync: float = 0.5

    def __post_init__(self):
        if self.steps < 0 or self.sync_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.lr <= 0 or self.sync_lr <= 0 or self.lr_denoiser <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_per, self.lambda_adv, self.lambda_fea,
                           self.lambda_sync)


def _parse_value(kind, raw, key):
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def load_config(path) -> TrainConfig:
    """Parse a flat key=value file; '#' starts a comment, unknown keys fail."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    types = {"int": int, "float": float, "bool": bool}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(types[kinds[key]], raw, key)
    return TrainConfig(**values)


def save_config(path, config: TrainConfig) -> None:
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(TrainConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


class SGD:
    """Momentum gradient descent over an explicit tensor list."""

    def __init__(self, tensors, momentum=0.9):
        self.momentum = float(momentum)
        self.items = [(t, np.zeros_like(t.data)) for t in tensors]

    def zero(self):
        for t, _ in self.items:
            t.grad = None

    def step(self, lr):
        for t, v in self.items:
            if t.grad is None:
                continue
            v *= self.momentum
            v += t.grad
            t.data = (t.data - lr * v).astype(np.float32)


def cosine_lr(base, step, total) -> float:
    """Cosine decay from base toward zero; strictly positive for step < total."""
    if total < 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# -- data preparation -----------------------------------------------------------


@dataclass
class _ClipData:
    pixels: np.ndarray      # [F, H, W, 3]
    mel: np.ndarray         # [L_a, n_mels]
    streams: dict           # tokens_per_second -> AudioTokenStream
    frame_ratio: float      # mel rows per video frame


def _prepare(clips, bundle: CodecBundle):
    data = []
    for record in clips:
        if len(record.frames) < 2:
            raise InputError(f"{record.spec.name}: need at least 2 frames to train motion")
        pixels = np.stack([f.pixels for f in record.frames]).astype(np.float32)
        mel = np.stack([f.coefficients for f in log_mel(record.audio)]).astype(np.float32)
        streams = {tps: tokenize(record.audio, bundle.codebooks, tokens_per_second=tps)
                   for tps in TPS_CHOICES}
        ratio = record.audio.sample_rate / bundle.denoiser.hop / record.spec.fps
        data.append(_ClipData(pixels, mel, streams, ratio))
    return data


def _mel_window(data: _ClipData, f0, n_frames):
    a = int(round(f0 * data.frame_ratio))
    b = min(data.mel.shape[0], int(round((f0 + n_frames) * data.frame_ratio)))
    return data.mel[a:b]


def _pose_codes(deltas, dictionary, bits):
    coeffs = deltas.astype(np.float64) @ dictionary.directions.data.astype(np.float64).T
    idx = quantize_coefficients(coeffs, bits)
    return [PoseCode(idx[f], f) for f in range(1, deltas.shape[0])]


# -- sync embedder pretraining ---------------------------------------------------

_NCE_BATCH = 8
_NCE_TAU = 0.15
_NCE_EMA = 0.98


def _unit_rows(m):
    """Row-normalize [K, D] within the trailing-broadcast rule via a rank-1 matmul."""
    ones = Tensor(np.ones((1, m.shape[1]), np.float32))
    inv = 1.0 / ((m * m).sum(axis=1, keepdims=True) + 1e-12).sqrt()
    return m * matmul(inv, ones)


def _info_nce(a_rows, v_rows, tau):
    s = matmul(a_rows, v_rows.transpose_last()) / tau
    lse_rows = s.exp().sum(axis=1).log()
    lse_cols = s.exp().sum(axis=0).log()
    diag = concat([s[i : i + 1, i : i + 1].reshape(1) for i in range(s.shape[0])], axis=0)
    return (lse_rows - diag).mean() + (lse_cols - diag).mean()


def pretrain_sync(sync, data, steps, rng, lr=1e-3, momentum=0.9):
    """Symmetric InfoNCE over matched audio-video windows with in-batch negatives.

    Raw pooled features sit in a tight cone around a large common-mode vector,
    which stalls cosine learning; each batch is therefore centered before the
    unit normalization, and the running center is folded into the final-layer
    biases when the embedder is frozen so plain ``embed_*`` calls agree with
    what was trained.
    """
    opt = SGD(list(sync.named_parameters().values()), momentum)
    n = len(data)
    mu_a = np.zeros(EMBED_DIM, np.float32)
    mu_v = np.zeros(EMBED_DIM, np.float32)
    for i in range(steps):
        combos = set()
        while len(combos) < min(_NCE_BATCH, n * 4):
            c = int(rng.integers(n))
            span = data[c].pixels.shape[0] - _SYNC_WINDOW_FRAMES
            combos.add((c, int(rng.integers(span + 1))))
        combos = sorted(combos)
        h_a = concat([sync.features_audio(_mel_window(data[c], f, _SYNC_WINDOW_FRAMES)).reshape(1, -1)
                      for c, f in combos], axis=0)
        h_v = concat([sync.features_video(Tensor(data[c].pixels[f : f + _SYNC_WINDOW_FRAMES])).reshape(1, -1)
                      for c, f in combos], axis=0)
        center_a, center_v = h_a.mean(axis=0), h_v.mean(axis=0)
        loss = _info_nce(_unit_rows(h_a - center_a), _unit_rows(h_v - center_v), _NCE_TAU)
        mu_a = _NCE_EMA * mu_a + (1.0 - _NCE_EMA) * center_a.data
        mu_v = _NCE_EMA * mu_v + (1.0 - _NCE_EMA) * center_v.data
        opt.zero()
        loss.backward()
        opt.step(cosine_lr(lr, i, steps))
    sync.a_fc2.b.data = (sync.a_fc2.b.data - mu_a).astype(np.float32)
    sync.v_fc2.b.data = (sync.v_fc2.b.data - mu_v).astype(np.float32)
    sync.set_requires_grad(False)


def sync_discrimination(sync, data, trials, rng) -> float:
    """Fraction of trials where the matched window scores closer than a shuffled one."""
    hits = 0
    n = len(data)
    with no_grad():
        for _ in range(trials):
            c = int(rng.integers(n))
            span = data[c].pixels.shape[0] - _SYNC_WINDOW_FRAMES
            f0 = int(rng.integers(span + 1))
            while True:
                c2, f2 = int(rng.integers(n)), int(rng.integers(span + 1))
                if (c2, f2) != (c, f0):
                    break
            frames = Tensor(data[c].pixels[f0 : f0 + _SYNC_WINDOW_FRAMES])
            matched = float(sync_loss(_mel_window(data[c], f0, _SYNC_WINDOW_FRAMES), frames, sync))
            shuffled = float(sync_loss(_mel_window(data[c2], f2, _SYNC_WINDOW_FRAMES), frames, sync))
            hits += matched < shuffled
    return hits / max(trials, 1)


# -- calibration -----------------------------------------------------------------


def _calibrate_scales(bundle: CodecBundle, data, max_clips=8):
    """Set latent scales so z0 statistics are near unit spread for the sampler."""
    deltas, raws = [], []
    for clip in data[:max_clips]:
        lat = video_latents([_Frame(p, i) for i, p in enumerate(clip.pixels)], bundle.encoder)
        deltas.append((lat - lat[0])[1:].ravel())
        with no_grad():
            raws.append(bundle.coder.encode(clip.mel).data.ravel())
    sv = 1.0 / max(float(np.concatenate(deltas).std()), 1e-3)
    sa = 1.0 / max(float(np.concatenate(raws).std()), 1e-3)
    bundle.denoiser.scale_video = sv
    bundle.denoiser.scale_audio = sa
    bundle.coder.latent_scale = sa


@dataclass(frozen=True)
class _Frame:
    pixels: np.ndarray
    frame_index: int


# -- the main loop ---------------------------------------------------------------


@dataclass
class TrainReport:
    bundle: CodecBundle
    out_dir: Path
    log_path: Path
    sync_accuracy: float


def _quantized_coeffs(coeffs, bits, c_max):
    """Straight-through estimator: quantized forward, identity gradient."""
    with no_grad():
        hard = dequantize_coefficients(quantize_coefficients(coeffs.data, bits, c_max),
                                       bits, c_max)
    return coeffs + Tensor(hard - coeffs.data)


def train(corpus, out_dir, config: TrainConfig = None) -> TrainReport:
    """Train every component on the corpus and write the checkpoint bundle.

    ``corpus`` is a directory with a manifest or an in-memory clip list.  Any
    non-finite loss aborts with the offending step index.  The Eq-style video
    objective updates the encoder/generator/dictionary on even steps, the
    discriminator on odd steps; the diffusion and audio-reconstruction terms
    are detached from those parameters and step every iteration.
    """
    config = config or TrainConfig()
    clips = load_corpus(corpus) if isinstance(corpus, (str, Path)) else list(corpus)
    if not clips:
        raise InputError("cannot train on an empty corpus")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    first = clips[0]
    bundle = new_bundle(config.seed, cross_attention=config.cross_attention,
                        dropout=config.dropout, t_steps=config.t_steps,
                        fps=first.spec.fps, sample_rate=first.audio.sample_rate)
    features = np.concatenate(
        [np.stack([f.coefficients for f in log_mel(c.audio)]) for c in clips]
    ).astype(np.float32)
    bundle.codebooks = fit_tokenizer(features, seed=config.seed)
    data = _prepare(clips, bundle)

    rng_sync = rng_for(config.seed, "train.sync")
    rng_data = rng_for(config.seed, "train.data")
    rng_diff = rng_for(config.seed, "train.diff")
    pretrain_sync(bundle.sync, data, config.sync_steps, rng_sync, lr=config.sync_lr,
                  momentum=config.momentum)
    sync_acc = sync_discrimination(bundle.sync, data, 200, rng_for(config.seed, "train.synceval"))

    fnet = FeatureNet()
    weights = config.weights()
    gen_params = (list(bundle.encoder.named_parameters().values())
                  + list(bundle.generator.named_parameters().values())
                  + list(bundle.dictionary.named_parameters().values()))
    opt_gen = SGD(gen_params, config.momentum)
    opt_disc = SGD(list(bundle.disc.named_parameters().values()), config.momentum)
    opt_den = SGD(list(bundle.denoiser.named_parameters().values()), config.momentum)
    opt_coder = SGD(list(bundle.coder.named_parameters().values()), config.momentum)

    log_path = out / LOG_FILE
    with open(log_path, "w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(LOG_COLUMNS)
        for step in range(config.steps):
            if step == config.calibrate_step:
                _calibrate_scales(bundle, data)
            lr = cosine_lr(config.lr, step, config.steps)
            c = int(rng_data.integers(len(data)))
            clip = data[c]
            n_frames = clip.pixels.shape[0]
            f = int(rng_data.integers(1, n_frames))
            bits = int(rng_data.choice(POSE_BITS_CHOICES))
            tps = int(rng_data.choice(TPS_CHOICES))

            # video route: reconstruct the I-frame and one quantized-motion frame
            x = Tensor(clip.pixels[[0, f]])
            lat = bundle.encoder(x)
            identity = lat[0:1]
            coeffs = bundle.dictionary.project(lat[1:2] - identity)
            hard = _quantized_coeffs(coeffs, bits, bundle.denoiser.pose_c_max)
            recon = concat([identity, identity + bundle.dictionary.compose(hard)], axis=0)
            fake = bundle.generator(recon)
            l_per = perceptual_loss(x, fake, fnet)
            l_adv_g, l_adv_d, l_fea = adversarial_and_fm_loss(x, fake, bundle.disc)
            l_sync = sync_loss(_mel_window(clip, f, 1), fake[1:2], bundle.sync)

            rows = rng_data.integers(0, clip.mel.shape[0], size=_AREC_BATCH)
            target = Tensor(bundle.coder.normalize(clip.mel[rows]))
            rec_diff = bundle.coder.unproj(bundle.coder.proj(target)) - target
            l_arec = (rec_diff * rec_diff).mean()

            # diffusion objective on detached latents at this step's rates
            with no_grad():
                all_lat = bundle.encoder(Tensor(clip.pixels)).data
                deltas = all_lat - all_lat[0]
                z_a = bundle.coder.encode(clip.mel).data * bundle.coder.latent_scale
            z0 = LatentPair(z_a.astype(np.float32),
                            (deltas * bundle.denoiser.scale_video).astype(np.float32), 0)
            poses = _pose_codes(deltas, bundle.dictionary, bits)
            l_diff = training_loss(z0, (poses, clip.streams[tps]), bundle.denoiser,
                                   bundle.schedule, rng_diff, pose_bits=bits)

            parts = {
                "l_diff": float(l_diff.item()),
                "l_per": float(l_per.item()),
                "l_adv_g": float(l_adv_g.item()),
                "l_fea": float(l_fea.item()),
                "l_sync": float(l_sync.item()),
            }
            adv_d = float(l_adv_d.item())
            arec = float(l_arec.item())
            if not all(math.isfinite(v) for v in list(parts.values()) + [adv_d, arec]):
                raise NumericError(f"non-finite loss at step {step}")
            total = total_loss(parts, weights)

            opt_den.zero()
            l_diff.backward()
            opt_den.step(cosine_lr(config.lr_denoiser, step, config.steps))
            opt_coder.zero()
            l_arec.backward()
            opt_coder.step(lr)
            if step % 2 == 0:
                objective = (weights.lambda_per * l_per + weights.lambda_adv * l_adv_g
                             + weights.lambda_fea * l_fea + weights.lambda_sync * l_sync)
                opt_gen.zero()
                objective.backward()
                opt_gen.step(lr)
                bundle.dictionary.normalize()
            else:
                opt_disc.zero()
                l_adv_d.backward()
                opt_disc.step(lr)

            log.writerow([step] + [f"{v:.6f}" for v in (
                parts["l_diff"], parts["l_per"], parts["l_adv_g"], adv_d,
                parts["l_fea"], parts["l_sync"], total, arec)])

    save_bundle(out, bundle)
    save_config(out / CONFIG_FILE, config)
    return TrainReport(bundle=bundle, out_dir=out, log_path=log_path,
                       sync_accuracy=sync_acc)
