"""Joint audio-visual latent diffusion: schedule, denoiser, sampler.

Audio and video latents share one denoiser and one timestep. Each block runs
per-modality self-attention, then a cross-attention exchange between the two
token streams, then per-modality MLPs, all modulated by the timestep embedding
(adaptive layer norm). The cross-attention sublayer has its own parameters and
a zero-initialized output projection, so a model built with the exchange
disabled is mathematically identical to an untrained enabled one; the flag
exists for the ablation study.

Conditions (pose coefficients for video, token embeddings for audio) are added
to the corresponding stream before block 1. Either condition may be replaced
by the ``MASK`` sentinel, which substitutes a learned embedding; training with
condition dropout makes masked sampling meaningful and enables imputation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import HOP, N_FFT, N_MELS, SAMPLE_RATE, AudioClip, AudioTokenStream, _effective_levels, detokenize, mel_band_centers_hz, mel_filterbank, token_spans
from .errors import CapabilityError, InputError, ShapeError, StateError
from .nn import Embedding, LayerNorm, Linear, Mlp, Module, MultiHeadAttention, sinusoid_encoding
from .tensor import Tensor, gather, no_grad, rng_for
from .video import POSE_BITS, POSE_C_MAX, POSE_M, PoseCode, dequantize_coefficients

T_STEPS = 200
BETA_MIN = 1e-4
BETA_MAX = 0.02
D_LAT = 64
N_BLOCKS = 4
N_HEADS = 4
CONDITION_DROPOUT = 0.1
_POS_SCALE = 16.0  # seconds-axis stretch so neighbouring frames get distinct phases


class _MaskSentinel:
    def __repr__(self):
        return "MASK"


MASK = _MaskSentinel()
"""Stand-in for an absent condition; replaced by a learned embedding."""


# --------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step diffusion coefficients, index 0 holding step t=1."""

    t_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        arrays = (self.beta, self.alpha, self.alpha_bar, self.sigma)
        if any(a.shape != (self.t_steps,) for a in arrays):
            raise ShapeError("schedule arrays must all have length t_steps")
        if not (np.all(self.beta > 0) and np.all(self.beta < 1)):
            raise InputError("beta must lie strictly inside (0, 1)")
        if not np.all(np.diff(self.beta.astype(np.float64)) > 0):
            raise InputError("beta must be strictly increasing")
        bar = self.alpha_bar.astype(np.float64)
        if not (np.all(np.diff(bar) < 0) and np.all(bar > 0) and np.all(bar <= 1)):
            raise InputError("alpha_bar must be strictly decreasing in (0, 1]")
        if np.any(self.sigma.astype(np.float64) ** 2 > self.beta + 1e-9):
            raise InputError("posterior variance may not exceed beta")

    def check_t(self, t):
        if not 1 <= t <= self.t_steps:
            raise InputError(f"timestep {t} outside [1, {self.t_steps}]")
        return int(t)

    def alpha_bar_at(self, t):
        """alpha_bar_t with alpha_bar_0 defined as 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[self.check_t(t) - 1])


def linear_schedule(t_steps=T_STEPS, beta_min=BETA_MIN, beta_max=BETA_MAX) -> NoiseSchedule:
    if t_steps < 1:
        raise InputError("schedule needs at least one step")
    if not 0 < beta_min < beta_max < 1:
        raise InputError("need 0 < beta_min < beta_max < 1")
    beta = np.linspace(beta_min, beta_max, t_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = beta * (1.0 - prev) / (1.0 - alpha_bar)
    sigma2[0] = beta[0]
    return NoiseSchedule(
        t_steps=int(t_steps),
        beta=beta.astype(np.float32),
        alpha=alpha.astype(np.float32),
        alpha_bar=alpha_bar.astype(np.float32),
        sigma=np.sqrt(sigma2).astype(np.float32),
    )


# --------------------------------------------------------------------------
# Latent pair


@dataclass(frozen=True, eq=False)
class LatentPair:
    """Audio [L_a, D] and video [F, D] latents at a shared timestep."""

    z_a: np.ndarray
    z_v: np.ndarray
    t: int

    def __post_init__(self):
        for name, z in (("z_a", self.z_a), ("z_v", self.z_v)):
            if z.ndim != 2:
                raise ShapeError(f"{name} must be 2-D, got {z.shape}")
            if not np.all(np.isfinite(z)):
                raise InputError(f"{name} contains non-finite values")
        if self.z_a.shape[1] != self.z_v.shape[1]:
            raise ShapeError("audio and video latents must share the feature dimension")
        if self.t < 0:
            raise InputError("timestep must be non-negative")


def forward_diffuse(z0: LatentPair, t, noise_pair, schedule: NoiseSchedule) -> LatentPair:
    """Closed-form forward noising applied to both modalities."""
    t = schedule.check_t(t)
    eps_a, eps_v = noise_pair
    if eps_a.shape != z0.z_a.shape or eps_v.shape != z0.z_v.shape:
        raise ShapeError("noise shapes must match the latent shapes")
    ab = schedule.alpha_bar_at(t)
    keep, mix = np.float32(np.sqrt(ab)), np.float32(np.sqrt(1.0 - ab))
    return LatentPair(
        z_a=(keep * z0.z_a + mix * eps_a).astype(np.float32),
        z_v=(keep * z0.z_v + mix * eps_v).astype(np.float32),
        t=t,
    )


# --------------------------------------------------------------------------
# Cross-attention exchange


class CrossAttnBlock(Module):
    """Bidirectional residual cross-attention between the two streams."""

    def __init__(self, name, seed, dim=D_LAT, heads=N_HEADS, zero_out=True):
        super().__init__()
        self.a_from_v = self.mod(
            "a_from_v", MultiHeadAttention(name + ".a_from_v", seed, dim, heads, zero_out=zero_out)
        )
        self.v_from_a = self.mod(
            "v_from_a", MultiHeadAttention(name + ".v_from_a", seed, dim, heads, zero_out=zero_out)
        )

    def __call__(self, x_a, x_v):
        if x_a.shape[-1] != x_v.shape[-1]:
            raise ShapeError(f"feature dims differ: {x_a.shape[-1]} vs {x_v.shape[-1]}")
        return x_a + self.a_from_v(x_a, x_v), x_v + self.v_from_a(x_v, x_a)


def av_cross_attention(x_a, x_v, params: CrossAttnBlock):
    """Functional wrapper; ndarray inputs give ndarray outputs."""
    raw = not isinstance(x_a, Tensor)
    if raw:
        with no_grad():
            out_a, out_v = params(Tensor(x_a), Tensor(x_v))
        return out_a.data, out_v.data
    return params(x_a, x_v)


# --------------------------------------------------------------------------
# Denoiser


class _Block(Module):
    """DiT-style block: self-attention, cross exchange, MLP, all adaLN-gated."""

    def __init__(self, name, seed, dim, heads, hidden):
        super().__init__()
        self.dim = dim
        self.mod_proj = self.mod("mod", Linear(name + ".mod", seed, dim, 4 * dim, zero=True))
        self.ln_sa_a = self.mod("ln_sa_a", LayerNorm(dim))
        self.ln_sa_v = self.mod("ln_sa_v", LayerNorm(dim))
        self.ln_mlp_a = self.mod("ln_mlp_a", LayerNorm(dim))
        self.ln_mlp_v = self.mod("ln_mlp_v", LayerNorm(dim))
        self.sa_a = self.mod("sa_a", MultiHeadAttention(name + ".sa_a", seed, dim, heads))
        self.sa_v = self.mod("sa_v", MultiHeadAttention(name + ".sa_v", seed, dim, heads))
        self.cross = self.mod("cross", CrossAttnBlock(name + ".cross", seed, dim, heads))
        self.mlp_a = self.mod("mlp_a", Mlp(name + ".mlp_a", seed, dim, hidden))
        self.mlp_v = self.mod("mlp_v", Mlp(name + ".mlp_v", seed, dim, hidden))

    def __call__(self, x_a, x_v, temb, use_cross):
        d = self.dim
        m = self.mod_proj(temb).reshape(4 * d)
        sh1, sc1 = m[0:d], m[d : 2 * d]
        sh2, sc2 = m[2 * d : 3 * d], m[3 * d : 4 * d]

        h = self.ln_sa_a(x_a) * (sc1 + 1.0) + sh1
        x_a = x_a + self.sa_a(h, h)
        h = self.ln_sa_v(x_v) * (sc1 + 1.0) + sh1
        x_v = x_v + self.sa_v(h, h)
        if use_cross:
            x_a, x_v = self.cross(x_a, x_v)
        x_a = x_a + self.mlp_a(self.ln_mlp_a(x_a) * (sc2 + 1.0) + sh2)
        x_v = x_v + self.mlp_v(self.ln_mlp_v(x_v) * (sc2 + 1.0) + sh2)
        return x_a, x_v


class Denoiser(Module):
    """Shared noise predictor for the audio-video latent pair.

    ``scale_audio`` and ``scale_video`` are calibration scalars applied by the
    codec when it builds z0 latents; they ride along in the checkpoint but are
    not trained by gradient descent.
    """

    def __init__(
        self,
        seed=0,
        d_lat=D_LAT,
        n_blocks=N_BLOCKS,
        heads=N_HEADS,
        mlp_ratio=4,
        cross_attention=True,
        dropout=CONDITION_DROPOUT,
        pose_dim=POSE_M,
        pose_bits=POSE_BITS,
        pose_c_max=POSE_C_MAX,
        ensemble=2,
        codebook=256,
        residual_levels=16,
        n_mels=N_MELS,
        fps=12.5,
        sample_rate=SAMPLE_RATE,
        hop=HOP,
        n_fft=N_FFT,
        t_steps=T_STEPS,
    ):
        super().__init__()
        self.seed = int(seed)
        self.d_lat = d_lat
        self.n_blocks = n_blocks
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.cross_attention = bool(cross_attention)
        self.dropout = float(dropout)
        self.pose_dim = pose_dim
        self.pose_bits = pose_bits
        self.pose_c_max = pose_c_max
        self.ensemble = ensemble
        self.codebook = codebook
        self.residual_levels = residual_levels
        self.n_mels = n_mels
        self.codebooks = None  # CodebookSet; rides along like the scales
        self.fps = float(fps)
        self.sample_rate = sample_rate
        self.hop = hop
        self.n_fft = n_fft
        self.t_steps = t_steps
        self.scale_audio = 1.0
        self.scale_video = 1.0

        d = d_lat
        self.temb = self.mod("temb", Mlp("den.temb", seed, d, 4 * d))
        self.pose_proj = self.mod("pose_proj", Linear("den.cond.pose", seed, pose_dim, d))
        for e in range(ensemble):
            self.mod(f"sem{e}", Embedding(f"den.cond.audio.sem{e}", seed, codebook, d))
        self.res_embed = self.mod(
            "res", Embedding("den.cond.audio.res", seed, _effective_levels(residual_levels), d)
        )
        self.feat_proj = self.mod(
            "feat_proj", Linear("den.cond.audio.feat", seed, ensemble * n_mels, d)
        )
        rng = rng_for(seed, "den.mask")
        self.mask_video = self.param(
            "mask_video", Tensor(rng.normal(0, 0.02, d).astype(np.float32), requires_grad=True)
        )
        self.mask_audio = self.param(
            "mask_audio", Tensor(rng.normal(0, 0.02, d).astype(np.float32), requires_grad=True)
        )
        self.blocks = [
            self.mod(f"blk{i}", _Block(f"den.blk{i}", seed, d, heads, mlp_ratio * d))
            for i in range(n_blocks)
        ]
        self.ln_f_a = self.mod("ln_f_a", LayerNorm(d))
        self.ln_f_v = self.mod("ln_f_v", LayerNorm(d))
        self.head_a = self.mod("head_a", Linear("den.head_a", seed, d, d, zero=True))
        self.head_v = self.mod("head_v", Linear("den.head_v", seed, d, d, zero=True))

    # -- conditioning ------------------------------------------------------

    def _video_condition(self, cond_pose, n_frames, pose_bits):
        if cond_pose is MASK:
            return Tensor(np.zeros((n_frames, self.d_lat), np.float32)) + self.mask_video
        values = np.zeros((n_frames, self.pose_dim), np.float32)
        if len(cond_pose) != n_frames - 1:
            raise InputError(f"{len(cond_pose)} pose codes for {n_frames} frames")
        for i, code in enumerate(cond_pose):
            values[i + 1] = dequantize_coefficients(code.coefficients, pose_bits, self.pose_c_max)
        return self.pose_proj(Tensor(values))

    def _audio_condition(self, cond_audio, n_frames):
        if cond_audio is MASK:
            return Tensor(np.zeros((n_frames, self.d_lat), np.float32)) + self.mask_audio
        rate = self.sample_rate / self.hop
        bounds = token_spans(n_frames, rate, cond_audio.tokens_per_second)
        if cond_audio.n_tokens != len(bounds) - 1:
            raise InputError(
                f"{cond_audio.n_tokens} audio tokens but {len(bounds) - 1} spans cover {n_frames} frames"
            )
        frame_tok = np.repeat(np.arange(len(bounds) - 1), np.diff(bounds))
        out = gather(self.res_embed.table, cond_audio.residual_tokens[frame_tok])
        for e in range(self.ensemble):
            table = self._mods[f"sem{e}"].table
            out = out + gather(table, cond_audio.semantic_tokens[frame_tok, e])
        if self.codebooks is None:
            raise StateError("denoiser has no codebooks attached; fit a tokenizer first")
        feats = detokenize(cond_audio, self.codebooks, self.residual_levels)
        feats = (feats + AudioLatentCoder.MEL_SHIFT) / AudioLatentCoder.MEL_SCALE
        return out + self.feat_proj(Tensor(feats[frame_tok].astype(np.float32)))

    # -- forward -----------------------------------------------------------

    def __call__(self, z_a, z_v, t, cond_pose, cond_audio, pose_bits=None):
        """Graph-building noise prediction; returns a Tensor per modality."""
        bits = self.pose_bits if pose_bits is None else pose_bits
        la, f = z_a.shape[0], z_v.shape[0]
        x_a = Tensor(z_a) if not isinstance(z_a, Tensor) else z_a
        x_v = Tensor(z_v) if not isinstance(z_v, Tensor) else z_v

        pos_a = (np.arange(la) * self.hop + self.n_fft / 2) / self.sample_rate
        pos_v = np.arange(f) / self.fps
        x_a = x_a + self._audio_condition(cond_audio, la)
        x_a = x_a + Tensor(sinusoid_encoding(pos_a, self.d_lat, scale=_POS_SCALE))
        x_v = x_v + self._video_condition(cond_pose, f, bits)
        x_v = x_v + Tensor(sinusoid_encoding(pos_v, self.d_lat, scale=_POS_SCALE))

        temb = self.temb(Tensor(sinusoid_encoding(np.array([float(t)]), self.d_lat)))
        for block in self.blocks:
            x_a, x_v = block(x_a, x_v, temb, self.cross_attention)
        return self.head_a(self.ln_f_a(x_a)), self.head_v(self.ln_f_v(x_v))


def predict_noise(z: LatentPair, t, cond_pose, cond_audio, params: Denoiser, pose_bits=None):
    """Noise estimate for both modalities as plain float32 arrays."""
    if not 1 <= t <= params.t_steps:
        raise InputError(f"timestep {t} outside [1, {params.t_steps}]")
    with no_grad():
        eps_a, eps_v = params(z.z_a, z.z_v, t, cond_pose, cond_audio, pose_bits)
    return eps_a.data.astype(np.float32), eps_v.data.astype(np.float32)


def denoise_step(
    z: LatentPair,
    t,
    conds,
    params: Denoiser,
    schedule: NoiseSchedule,
    noise=None,
    eps_hat=None,
    pose_bits=None,
) -> LatentPair:
    """One reverse step; both modalities read the same pre-step pair.

    ``noise=None`` runs the deterministic sigma=0 mode; the t=1 step is
    noiseless regardless. ``eps_hat`` substitutes an external prediction,
    which is how the closed-form inversion checks drive the chain.
    """
    if t < 1:
        raise InputError("reverse steps run from t=T down to t=1")
    t = schedule.check_t(t)
    if z.t != t:
        raise InputError(f"latent pair is at t={z.t}, step expects t={t}")
    if eps_hat is None:
        cond_pose, cond_audio = conds
        eps_hat = predict_noise(z, t, cond_pose, cond_audio, params, pose_bits)
    eps_a, eps_v = eps_hat

    beta = float(schedule.beta[t - 1])
    alpha = float(schedule.alpha[t - 1])
    ab = schedule.alpha_bar_at(t)
    shrink = np.float32(beta / np.sqrt(1.0 - ab))
    gain = np.float32(1.0 / np.sqrt(alpha))
    mu_a = gain * (z.z_a - shrink * eps_a)
    mu_v = gain * (z.z_v - shrink * eps_v)
    if t > 1 and noise is not None:
        sig = schedule.sigma[t - 1]
        mu_a = mu_a + sig * noise[0]
        mu_v = mu_v + sig * noise[1]
    return LatentPair(mu_a.astype(np.float32), mu_v.astype(np.float32), t - 1)


def sample_joint(
    conds,
    params: Denoiser,
    schedule: NoiseSchedule,
    seed,
    *,
    n_audio_frames,
    n_video_frames,
    pose_bits=None,
) -> LatentPair:
    """Full reverse loop from standard-normal noise; deterministic in seed."""
    rng = np.random.default_rng(seed)
    d = params.d_lat
    z = LatentPair(
        rng.standard_normal((n_audio_frames, d)).astype(np.float32),
        rng.standard_normal((n_video_frames, d)).astype(np.float32),
        schedule.t_steps,
    )
    for t in range(schedule.t_steps, 0, -1):
        noise = (
            rng.standard_normal(z.z_a.shape).astype(np.float32),
            rng.standard_normal(z.z_v.shape).astype(np.float32),
        )
        z = denoise_step(z, t, conds, params, schedule, noise=noise, pose_bits=pose_bits)
    return z


def training_loss(z0: LatentPair, conds, params: Denoiser, schedule: NoiseSchedule, rng,
                  dropout=None, pose_bits=None):
    """Noise-prediction objective: per-element MSE summed over modalities.

    Draw order is fixed (t, two dropout uniforms, eps_a, eps_v) so a given
    generator state always produces the same loss surface. Returns the loss
    as a graph Tensor; callers take ``.item()`` for logging.
    """
    if z0.t != 0:
        raise InputError("training starts from clean latents at t=0")
    t = int(rng.integers(1, schedule.t_steps + 1))
    u_pose, u_audio = rng.random(), rng.random()
    p = params.dropout if dropout is None else dropout
    cond_pose, cond_audio = conds
    if p > 0:
        if u_pose < p:
            cond_pose = MASK
        if u_audio < p:
            cond_audio = MASK
    eps_a = rng.standard_normal(z0.z_a.shape).astype(np.float32)
    eps_v = rng.standard_normal(z0.z_v.shape).astype(np.float32)
    zt = forward_diffuse(z0, t, (eps_a, eps_v), schedule)
    hat_a, hat_v = params(zt.z_a, zt.z_v, t, cond_pose, cond_audio, pose_bits=pose_bits)
    diff_a = hat_a - Tensor(eps_a)
    diff_v = hat_v - Tensor(eps_v)
    return (diff_a * diff_a).mean() + (diff_v * diff_v).mean()


def impute_modality(
    available,
    params: Denoiser,
    schedule: NoiseSchedule,
    seed,
    *,
    n_audio_frames,
    n_video_frames,
    pose_bits=None,
) -> LatentPair:
    """Sample with the missing modality's condition masked out.

    ``available`` is an AudioTokenStream (video is imputed), a PoseCode
    sequence (audio is imputed), or a (poses, audio) pair, in which case the
    sentinel is unused and the call equals plain sampling.
    """
    if params.dropout <= 0:
        raise CapabilityError("model was trained without condition dropout")
    if isinstance(available, AudioTokenStream):
        conds = (MASK, available)
    elif isinstance(available, (list, tuple)) and all(isinstance(p, PoseCode) for p in available):
        conds = (list(available), MASK)
    elif isinstance(available, tuple) and len(available) == 2:
        conds = available
    else:
        raise InputError("available must be audio tokens, pose codes, or a (poses, audio) pair")
    return sample_joint(
        conds,
        params,
        schedule,
        seed,
        n_audio_frames=n_audio_frames,
        n_video_frames=n_video_frames,
        pose_bits=pose_bits,
    )


# --------------------------------------------------------------------------
# Audio latent coder and waveform synthesis


class AudioLatentCoder(Module):
    """Linear maps between normalized log-mel frames and diffusion latents.

    The normalization (shift 6, scale 4) centers typical speech-band log-mel
    values near zero at roughly unit spread; ``latent_scale`` is the codec's
    calibration scalar, stored here because audio decode needs it.
    """

    MEL_SHIFT = 6.0
    MEL_SCALE = 4.0

    def __init__(self, seed=0, n_mels=N_MELS, d_lat=D_LAT):
        super().__init__()
        self.n_mels = n_mels
        self.d_lat = d_lat
        self.seed = int(seed)
        self.latent_scale = 1.0
        self.proj = self.mod("proj", Linear("acoder.proj", seed, n_mels, d_lat))
        self.unproj = self.mod("unproj", Linear("acoder.unproj", seed, d_lat, n_mels))

    def normalize(self, logmel):
        return (logmel + self.MEL_SHIFT) / self.MEL_SCALE

    def encode(self, logmel):
        """Normalized log-mel [L, n_mels] -> raw (unscaled) latents [L, D]."""
        x = logmel if isinstance(logmel, Tensor) else Tensor(self.normalize(logmel))
        return self.proj(x)

    def decode_mel(self, latents):
        """Raw latents -> log-mel frames (denormalized), as a Tensor."""
        x = latents if isinstance(latents, Tensor) else Tensor(latents)
        return self.unproj(x) * self.MEL_SCALE - self.MEL_SHIFT


_GAIN_CACHE = {}


def _band_gains(sample_rate, n_fft, n_mels):
    """Amplitude per unit mel energy, calibrated on a unit cosine per band."""
    key = (sample_rate, n_fft, n_mels)
    if key not in _GAIN_CACHE:
        centers = mel_band_centers_hz(sample_rate, n_mels)
        fb = mel_filterbank(sample_rate, n_fft, n_mels)
        window = np.hanning(n_fft)
        n = np.arange(n_fft)
        gains = np.empty(n_mels)
        for b, f in enumerate(centers):
            frame = np.cos(2 * np.pi * f * n / sample_rate)
            power = np.abs(np.fft.rfft(frame * window)) ** 2
            gains[b] = 1.0 / np.sqrt(fb[b] @ power)
        _GAIN_CACHE[key] = (centers, gains)
    return _GAIN_CACHE[key]


def decode_audio(z_a, coder: AudioLatentCoder, sample_rate=SAMPLE_RATE, n_fft=N_FFT, hop=HOP) -> AudioClip:
    """Waveform synthesis from clean audio latents.

    Inverts the latent projection to log-mel, then renders each band as a
    phase-continuous cosine at the band center with the analysis-calibrated
    amplitude. Output length is exactly L_a * hop samples, clipped to [-1, 1].
    """
    if isinstance(z_a, LatentPair):
        z_a = z_a.z_a
    with no_grad():
        raw = z_a / max(coder.latent_scale, 1e-12)
        logmel = coder.decode_mel(raw).data.astype(np.float64)
    energies = np.exp(logmel)
    centers, gains = _band_gains(sample_rate, n_fft, coder.n_mels)
    amps = np.sqrt(np.maximum(energies, 0.0)) * gains
    n_samples = z_a.shape[0] * hop
    per_sample = np.repeat(amps, hop, axis=0)[:n_samples]
    t = np.arange(n_samples) / sample_rate
    phases = 2 * np.pi * ((np.arange(coder.n_mels) * 0.6180339887) % 1.0)
    wave = np.sum(per_sample * np.cos(2 * np.pi * centers * t[:, None] + phases), axis=1)
    return AudioClip(np.clip(wave, -1.0, 1.0).astype(np.float32), sample_rate)


# --------------------------------------------------------------------------
# Checkpoint packing


def denoiser_to_arrays(model: Denoiser) -> dict:
    arrays = {"den." + k: v for k, v in model.state_arrays().items()}
    arrays["den.config"] = np.array(
        [
            1.0,
            model.seed,
            model.d_lat,
            model.n_blocks,
            model.heads,
            model.mlp_ratio,
            1.0 if model.cross_attention else 0.0,
            model.dropout,
            model.pose_dim,
            model.pose_bits,
            model.pose_c_max,
            model.ensemble,
            model.codebook,
            model.residual_levels,
            model.fps,
            model.sample_rate,
            model.hop,
            model.n_fft,
            model.t_steps,
            model.scale_audio,
            model.scale_video,
        ],
        dtype=np.float64,
    )
    return arrays


def denoiser_from_arrays(arrays: dict) -> Denoiser:
    cfg = np.asarray(arrays["den.config"], dtype=np.float64)
    model = Denoiser(
        seed=int(cfg[1]),
        d_lat=int(cfg[2]),
        n_blocks=int(cfg[3]),
        heads=int(cfg[4]),
        mlp_ratio=int(cfg[5]),
        cross_attention=bool(cfg[6]),
        dropout=float(cfg[7]),
        pose_dim=int(cfg[8]),
        pose_bits=int(cfg[9]),
        pose_c_max=float(cfg[10]),
        ensemble=int(cfg[11]),
        codebook=int(cfg[12]),
        residual_levels=int(cfg[13]),
        fps=float(cfg[14]),
        sample_rate=int(cfg[15]),
        hop=int(cfg[16]),
        n_fft=int(cfg[17]),
        t_steps=int(cfg[18]),
    )
    model.scale_audio = float(cfg[19])
    model.scale_video = float(cfg[20])
    model.load_state(arrays, prefix="den.")
    return model


def coder_to_arrays(coder: AudioLatentCoder) -> dict:
    arrays = {"acoder." + k: v for k, v in coder.state_arrays().items()}
    arrays["acoder.config"] = np.array(
        [1.0, coder.seed, coder.n_mels, coder.d_lat, coder.latent_scale], dtype=np.float64
    )
    return arrays


def coder_from_arrays(arrays: dict) -> AudioLatentCoder:
    cfg = np.asarray(arrays["acoder.config"], dtype=np.float64)
    coder = AudioLatentCoder(seed=int(cfg[1]), n_mels=int(cfg[2]), d_lat=int(cfg[3]))
    coder.latent_scale = float(cfg[4])
    coder.load_state(arrays, prefix="acoder.")
    return coder
