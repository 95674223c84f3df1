"""Reconstruction-side objectives: sync, perceptual, adversarial, total.

The sync embedder is a two-branch network scoring audio/mouth agreement by
cosine distance; it is pretrained contrastively and then frozen, standing in
for a large pretrained lip-sync scorer. The perceptual metric uses a fixed,
seeded, randomly initialized conv net; random features are a long way from a
trained perceptual space, but distances in them still order near-duplicates
sensibly, which is all the training signal needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import AudioLatentCoder
from .errors import InputError, NumericError, ShapeError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor
from .video import VideoFrame

EMBED_DIM = 32
MOUTH_ROWS = slice(38, 58)
MOUTH_COLS = slice(22, 42)
_FEATURE_NET_SEED = 1234


@dataclass(frozen=True)
class LossWeights:
    lambda_per: float = 1.0
    lambda_adv: float = 0.1
    lambda_fea: float = 1.0
    lambda_sync: float = 0.5

    def __post_init__(self):
        for name, value in vars(self).items():
            if not np.isfinite(value) or value < 0:
                raise InputError(f"{name} must be finite and non-negative, got {value}")


def _frames_tensor(x):
    """Coerce a frame, frame batch, or VideoFrame to a [B,H,W,3] Tensor."""
    if isinstance(x, VideoFrame):
        x = x.pixels
    if isinstance(x, Tensor):
        return x.reshape(1, *x.shape) if x.ndim == 3 else x
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected [H,W,3] or [B,H,W,3] frames, got {arr.shape}")
    return Tensor(arr)


def _unit(e):
    return e / ((e * e).sum() + 1e-12).sqrt()


class SyncEmbedder(Module):
    """Audio and mouth-crop branches mapping to unit-norm 32-dim embeddings."""

    def __init__(self, seed=0, n_mels=40, fps=12.5, sample_rate=16000, hop=256):
        super().__init__()
        self.fps = float(fps)
        self.frame_ratio = sample_rate / hop / fps
        crop_dim = (MOUTH_ROWS.stop - MOUTH_ROWS.start) * (MOUTH_COLS.stop - MOUTH_COLS.start) * 3
        self.a_fc1 = self.mod("a_fc1", Linear("sync.a.fc1", seed, n_mels, 64))
        self.a_fc2 = self.mod("a_fc2", Linear("sync.a.fc2", seed, 64, EMBED_DIM))
        self.v_fc1 = self.mod("v_fc1", Linear("sync.v.fc1", seed, crop_dim, 64))
        self.v_fc2 = self.mod("v_fc2", Linear("sync.v.fc2", seed, 64, EMBED_DIM))

    def features_audio(self, logmel):
        """Pre-normalization pooled features [EMBED_DIM] of a log-mel window."""
        x = logmel if isinstance(logmel, Tensor) else Tensor(
            (np.asarray(logmel, np.float32) + AudioLatentCoder.MEL_SHIFT) / AudioLatentCoder.MEL_SCALE
        )
        return self.a_fc2(self.a_fc1(x).silu()).mean(axis=0)

    def features_video(self, frames):
        """Pre-normalization pooled features [EMBED_DIM] of the mouth region."""
        x = _frames_tensor(frames)
        crop = x[:, MOUTH_ROWS, MOUTH_COLS, :]
        flat = crop.reshape(crop.shape[0], -1)
        return self.v_fc2(self.v_fc1(flat).silu()).mean(axis=0)

    def embed_audio(self, logmel):
        """Log-mel window [W, n_mels] -> unit embedding [EMBED_DIM]."""
        return _unit(self.features_audio(logmel))

    def embed_video(self, frames):
        """Frames [F, H, W, 3] -> unit embedding of the mouth region."""
        return _unit(self.features_video(frames))


def cosine_distance(e_audio, e_visual):
    """1 - cos for unit vectors; lands in [0, 2]."""
    return 1.0 - (e_audio * e_visual).sum()


def sync_loss(audio_window, video_frames, embedder: SyncEmbedder):
    """Cosine distance between the audio window and the mouth-crop span.

    The two streams must cover the same time span: the log-mel window length
    may deviate from frames * (feature rate / fps) by at most one video frame
    period, which absorbs the analysis window's edge loss.
    """
    n_frames = video_frames.shape[0] if hasattr(video_frames, "shape") else len(video_frames)
    n_windows = audio_window.shape[0]
    expect = n_frames * embedder.frame_ratio
    if abs(n_windows - expect) > embedder.frame_ratio:
        raise InputError(
            f"audio window of {n_windows} frames misaligned with {n_frames} video frames"
        )
    return cosine_distance(embedder.embed_audio(audio_window), embedder.embed_video(video_frames))


class FeatureNet(Module):
    """Fixed random 3-layer conv feature extractor for the perceptual metric."""

    def __init__(self, seed=_FEATURE_NET_SEED):
        super().__init__()
        self.c1 = self.mod("c1", Conv2d("fnet.c1", seed, 3, 3, 8, stride=2, pad=1))
        self.c2 = self.mod("c2", Conv2d("fnet.c2", seed, 3, 8, 16, stride=2, pad=1))
        self.c3 = self.mod("c3", Conv2d("fnet.c3", seed, 3, 16, 32, stride=2, pad=1))
        self.set_requires_grad(False)

    def features(self, x):
        a1 = self.c1(x).leaky_relu(0.2)
        a2 = self.c2(a1).leaky_relu(0.2)
        a3 = self.c3(a2).leaky_relu(0.2)
        return [a1, a2, a3]


def perceptual_loss(x, y, feature_net: FeatureNet):
    """Mean squared activation distance, averaged over the three layers."""
    xt, yt = _frames_tensor(x), _frames_tensor(y)
    if xt.shape != yt.shape:
        raise ShapeError(f"frame shapes differ: {xt.shape} vs {yt.shape}")
    total = 0.0
    fx, fy = feature_net.features(xt), feature_net.features(yt)
    for ax, ay in zip(fx, fy):
        d = ax - ay
        total = total + (d * d).mean()
    return total * (1.0 / len(fx))


class PatchDiscriminator(Module):
    """Per-patch real/fake scores with two intermediate feature maps."""

    n_features = 2

    def __init__(self, seed=0):
        super().__init__()
        self.c1 = self.mod("c1", Conv2d("disc.c1", seed, 3, 3, 16, stride=2, pad=1))
        self.c2 = self.mod("c2", Conv2d("disc.c2", seed, 3, 16, 32, stride=2, pad=1))
        self.score = self.mod("score", Conv2d("disc.score", seed, 3, 32, 1, stride=1, pad=1))

    def features(self, x):
        h1 = self.c1(x).leaky_relu(0.2)
        h2 = self.c2(h1).leaky_relu(0.2)
        return [h1, h2], self.score(h2)


def adversarial_and_fm_loss(real, fake, disc: PatchDiscriminator):
    """Hinge GAN terms plus feature matching.

    The generator-side terms (l_adv_gen, l_fea) keep the graph through
    ``fake``; the discriminator term scores a detached copy so one call
    serves both phases of the alternating update.
    """
    real_t, fake_t = _frames_tensor(real), _frames_tensor(fake)
    if real_t.shape != fake_t.shape:
        raise ShapeError(f"frame shapes differ: {real_t.shape} vs {fake_t.shape}")
    feats_real, score_real = disc.features(real_t.detach())
    feats_fake, score_fake = disc.features(fake_t)
    l_adv_gen = -score_fake.mean()
    l_fea = 0.0
    for fr, ff in zip(feats_real, feats_fake):
        l_fea = l_fea + (fr.detach() - ff).abs().mean()
    l_fea = l_fea * (1.0 / disc.n_features)
    _, score_fake_d = disc.features(fake_t.detach())
    l_adv_disc = (1.0 - score_real).relu().mean() + (1.0 + score_fake_d).relu().mean()
    return l_adv_gen, l_adv_disc, l_fea


def total_loss(components, w: LossWeights):
    """Weighted sum over loss terms; the diffusion term carries weight 1."""
    keys = ("l_diff", "l_per", "l_adv_g", "l_fea", "l_sync")
    values = {}
    for key in keys:
        v = components[key]
        scalar = float(v.item()) if isinstance(v, Tensor) else float(v)
        if not np.isfinite(scalar):
            raise NumericError(f"loss component {key} is {scalar}")
        values[key] = v
    return (
        values["l_diff"]
        + w.lambda_per * values["l_per"]
        + w.lambda_adv * values["l_adv_g"]
        + w.lambda_fea * values["l_fea"]
        + w.lambda_sync * values["l_sync"]
    )
