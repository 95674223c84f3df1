"""Clip-level codec: the trained-model bundle and encode/decode pipelines.

Encoding is deterministic analysis: identity latent from the I-frame, quantized
motion coefficients per P-frame, pooled audio tokens, all muxed into one
container. Decoding runs the joint reverse-diffusion sampler over both latent
streams conditioned on the decoded symbols; video pixels come from the motion
dictionary route when pose codes are present and from the sampled latents when
they are masked, audio always comes from the sampled latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import (
    HOP,
    N_FFT,
    AudioClip,
    AudioTokenStream,
    CodebookSet,
    detokenize,
    load_codebooks,
    log_mel,
    save_codebooks,
    token_spans,
    tokenize,
)
from .container import StreamMeta, demux, mux
from .diffusion import (
    CONDITION_DROPOUT,
    T_STEPS,
    AudioLatentCoder,
    Denoiser,
    LatentPair,
    NoiseSchedule,
    coder_from_arrays,
    coder_to_arrays,
    decode_audio,
    denoiser_from_arrays,
    denoiser_to_arrays,
    impute_modality,
    linear_schedule,
    sample_joint,
)
from .errors import CapabilityError, InputError
from .losses import PatchDiscriminator, SyncEmbedder
from .tensor import Tensor, load_tensors, no_grad, save_tensors
from .video import (
    POSE_BITS,
    POSE_M,
    FrameEncoder,
    FrameGenerator,
    IdentityCode,
    MotionDictionary,
    VideoFrame,
    apply_motion,
    extract_identity,
    extract_pose,
)

MODELS_FILE = "models.avtn"
CODEBOOKS_FILE = "codebooks.avcb"


@dataclass
class CodecBundle:
    """Every trainable component plus the sampler schedule.

    ``codebooks`` is None until a tokenizer has been fitted; ``disc`` exists
    only for training and resuming, inference never touches it.
    """

    seed: int
    encoder: FrameEncoder
    generator: FrameGenerator
    dictionary: MotionDictionary
    coder: AudioLatentCoder
    denoiser: Denoiser
    sync: SyncEmbedder
    disc: PatchDiscriminator
    codebooks: CodebookSet
    schedule: NoiseSchedule
    size: int = 64
    base: int = 16


def new_bundle(seed=0, *, cross_attention=True, dropout=CONDITION_DROPOUT,
               size=64, base=16, d_lat=64, m=POSE_M, t_steps=T_STEPS,
               fps=12.5, sample_rate=16000) -> CodecBundle:
    """Freshly initialized models; component seeds are fixed offsets of one master."""
    denoiser = Denoiser(seed=seed + 5, d_lat=d_lat, cross_attention=cross_attention,
                        dropout=dropout, pose_dim=m, fps=fps, sample_rate=sample_rate,
                        t_steps=t_steps)
    return CodecBundle(
        seed=int(seed),
        encoder=FrameEncoder(seed + 1, d_lat, size, base),
        generator=FrameGenerator(seed + 2, d_lat, size, base),
        dictionary=MotionDictionary(seed + 3, m, d_lat),
        coder=AudioLatentCoder(seed + 4, d_lat=d_lat),
        denoiser=denoiser,
        sync=SyncEmbedder(seed + 6, fps=fps, sample_rate=sample_rate),
        disc=PatchDiscriminator(seed + 7),
        codebooks=None,
        schedule=linear_schedule(t_steps=t_steps),
        size=int(size),
        base=int(base),
    )


def save_bundle(model_dir, bundle: CodecBundle) -> Path:
    """Write models.avtn (all parameters and configs) plus the codebook file."""
    out = Path(model_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    arrays.update(denoiser_to_arrays(bundle.denoiser))
    arrays.update(coder_to_arrays(bundle.coder))
    for prefix, mod in (("enc.", bundle.encoder), ("gen.", bundle.generator),
                        ("dict.", bundle.dictionary), ("sync.", bundle.sync)):
        for key, value in mod.state_arrays().items():
            arrays[prefix + key] = value
    if bundle.disc is not None:
        for key, value in bundle.disc.state_arrays().items():
            arrays["disc." + key] = value
    arrays["bundle.config"] = np.array(
        [1.0, bundle.seed, bundle.size, bundle.base, bundle.denoiser.d_lat,
         bundle.dictionary.m, 1.0 if bundle.disc is not None else 0.0],
        dtype=np.float64,
    )
    save_tensors(out / MODELS_FILE, arrays)
    if bundle.codebooks is not None:
        save_codebooks(out / CODEBOOKS_FILE, bundle.codebooks)
    return out / MODELS_FILE


def load_bundle(model_dir) -> CodecBundle:
    root = Path(model_dir)
    path = root / MODELS_FILE
    if not path.exists():
        raise CapabilityError(f"no model checkpoint at {path}; run training first")
    arrays = load_tensors(path)
    cfg = np.asarray(arrays["bundle.config"], dtype=np.float64)
    seed, size, base = int(cfg[1]), int(cfg[2]), int(cfg[3])
    d_lat, m = int(cfg[4]), int(cfg[5])

    denoiser = denoiser_from_arrays(arrays)
    coder = coder_from_arrays(arrays)
    encoder = FrameEncoder(seed + 1, d_lat, size, base)
    encoder.load_state(arrays, prefix="enc.")
    generator = FrameGenerator(seed + 2, d_lat, size, base)
    generator.load_state(arrays, prefix="gen.")
    dictionary = MotionDictionary(seed + 3, m, d_lat)
    dictionary.load_state(arrays, prefix="dict.")
    sync = SyncEmbedder(seed + 6, n_mels=coder.n_mels, fps=denoiser.fps,
                        sample_rate=denoiser.sample_rate, hop=denoiser.hop)
    sync.load_state(arrays, prefix="sync.")
    disc = None
    if int(cfg[6]):
        disc = PatchDiscriminator(seed + 7)
        disc.load_state(arrays, prefix="disc.")

    cb_path = root / CODEBOOKS_FILE
    codebooks = load_codebooks(cb_path) if cb_path.exists() else None
    return CodecBundle(
        seed=seed, encoder=encoder, generator=generator, dictionary=dictionary,
        coder=coder, denoiser=denoiser, sync=sync, disc=disc, codebooks=codebooks,
        schedule=linear_schedule(t_steps=denoiser.t_steps), size=size, base=base,
    )


# -- latent construction --------------------------------------------------------


def mel_frame_count(n_samples, n_fft=N_FFT, hop=HOP) -> int:
    if n_samples < n_fft:
        return 0
    return 1 + (n_samples - n_fft) // hop


def video_latents(frames, encoder: FrameEncoder) -> np.ndarray:
    """Per-frame encoder outputs [F, D], gradient-free."""
    stack = np.stack([f.pixels for f in frames]).astype(np.float32)
    with no_grad():
        z = encoder(Tensor(stack))
    return z.data


def clip_latents(frames, clip: AudioClip, bundle: CodecBundle) -> LatentPair:
    """Clean z0 targets: scaled motion deltas and scaled audio projections.

    Video latents are anchored to the I-frame (z_v[0] is exactly zero) so the
    identity never has to be guessed by the sampler; audio latents carry the
    coder's calibration scale, which audio decode divides back out.
    """
    lat = video_latents(frames, bundle.encoder)
    z_v = (lat - lat[0]) * bundle.denoiser.scale_video
    mel = np.stack([f.coefficients for f in log_mel(clip, n_mels=bundle.coder.n_mels)])
    with no_grad():
        z_a = bundle.coder.encode(mel).data * bundle.coder.latent_scale
    return LatentPair(z_a.astype(np.float32), z_v.astype(np.float32), 0)


# -- encode ----------------------------------------------------------------------


def encode_clip(frames, clip: AudioClip, bundle: CodecBundle, *, fps,
                pose_bits=POSE_BITS, tokens_per_second=4) -> bytes:
    """Analyze one clip and serialize it; deterministic in its inputs."""
    if not frames:
        raise InputError("cannot encode a clip with no frames")
    if bundle.codebooks is None:
        raise CapabilityError("bundle has no fitted audio codebooks; run training first")
    h, w, _ = frames[0].pixels.shape
    if h != bundle.size or w != bundle.size:
        raise InputError(f"frames are {h}x{w}, model expects {bundle.size}x{bundle.size}")
    for i, frame in enumerate(frames):
        if frame.frame_index != i:
            raise InputError("frames must be indexed 0..N-1 in order")
    if clip.sample_rate != bundle.denoiser.sample_rate:
        raise InputError(f"sample rate {clip.sample_rate} != model rate {bundle.denoiser.sample_rate}")

    identity = extract_identity(frames[0], bundle.encoder)
    poses = [extract_pose(frame, identity, bundle.dictionary, bundle.encoder, bits=pose_bits)
             for frame in frames[1:]]
    stream = tokenize(clip, bundle.codebooks, tokens_per_second=tokens_per_second)
    meta = StreamMeta(
        width=w, height=h, frame_count=len(frames), fps=float(fps),
        sample_rate=clip.sample_rate, audio_sample_count=clip.samples.size,
        tokens_per_second=tokens_per_second, ensemble_size=len(bundle.codebooks.members),
        pose_bits=pose_bits, dictionary_size=bundle.dictionary.m,
    )
    return mux(identity, poses, stream, meta)


# -- decode ----------------------------------------------------------------------


@dataclass
class DecodeResult:
    frames: list
    audio: AudioClip
    meta: StreamMeta
    pair: LatentPair
    imputed: str


def _generate_frames(bundle: CodecBundle, latents: np.ndarray) -> list:
    with no_grad():
        px = bundle.generator(Tensor(latents.astype(np.float32)))
    return [VideoFrame(np.clip(px.data[i], 0.0, 1.0), i) for i in range(px.shape[0])]


def pose_route_frames(identity: IdentityCode, poses, bundle: CodecBundle, pose_bits) -> list:
    """Deterministic reconstruction: I-frame plus dictionary motion per pose code."""
    frames = _generate_frames(bundle, identity.latent[None])
    for pose in poses:
        frame = apply_motion(identity, pose, bundle.dictionary, bundle.generator, bits=pose_bits)
        frames.append(frame)
    return frames


def latent_route_frames(identity: IdentityCode, z_v: np.ndarray, bundle: CodecBundle) -> list:
    """Render sampled motion latents on top of the decoded identity."""
    scale = max(bundle.denoiser.scale_video, 1e-12)
    return _generate_frames(bundle, identity.latent[None] + z_v / scale)


def decode_clip(blob: bytes, bundle: CodecBundle, *, seed=0, impute=None) -> DecodeResult:
    """Reconstruct a container; ``impute`` drops that modality's conditioning.

    Synthesized audio covers whole analysis hops; any remainder declared in the
    header is zero-padded so output length always matches the header exactly.
    """
    if impute not in (None, "audio", "video"):
        raise InputError(f"impute must be 'audio' or 'video', not {impute!r}")
    identity, poses, stream, meta = demux(blob)
    la = mel_frame_count(meta.audio_sample_count)
    f = meta.frame_count

    pair = None
    if la > 0 and f > 0:
        kwargs = dict(n_audio_frames=la, n_video_frames=f, pose_bits=meta.pose_bits)
        if impute == "audio":
            pair = impute_modality(poses, bundle.denoiser, bundle.schedule, seed, **kwargs)
        elif impute == "video":
            pair = impute_modality(stream, bundle.denoiser, bundle.schedule, seed, **kwargs)
        else:
            pair = sample_joint((poses, stream), bundle.denoiser, bundle.schedule, seed, **kwargs)

    if f == 0:
        frames = []
    elif impute == "video" and pair is not None:
        frames = latent_route_frames(identity, pair.z_v, bundle)
    else:
        frames = pose_route_frames(identity, poses, bundle, meta.pose_bits)

    n = meta.audio_sample_count
    if pair is not None and n > 0:
        synth = decode_audio(pair.z_a, bundle.coder, meta.sample_rate).samples
        samples = np.zeros(n, np.float32)
        samples[: min(n, synth.size)] = synth[:n]
    else:
        samples = np.zeros(n, np.float32)
    audio = AudioClip(samples, meta.sample_rate)
    return DecodeResult(frames=frames, audio=audio, meta=meta, pair=pair, imputed=impute)


# -- deterministic token-fidelity routes (rate sweeps) ---------------------------


def detokenized_mel(stream: AudioTokenStream, codebooks: CodebookSet, n_frames,
                    sample_rate=16000, hop=HOP) -> np.ndarray:
    """Per-frame log-mel implied by the token stream alone [n_frames, n_mels]."""
    feats = detokenize(stream, codebooks)[:, : codebooks.feature_dim]
    bounds = token_spans(n_frames, sample_rate / hop, stream.tokens_per_second)
    if len(bounds) - 1 != stream.n_tokens:
        raise InputError(f"{stream.n_tokens} tokens cannot cover {n_frames} frames")
    return np.repeat(feats, np.diff(bounds), axis=0)
