"""The .avcc container: header, identity section, entropy-coded payloads.

Layout (all little-endian):

  magic `AVC1` | version u16 | width u16 | height u16 | frame_count u32 |
  fps f32 | sample_rate u32 | audio_sample_count u32 | tokens_per_second u8 |
  ensemble_size u8 | pose_bits u8 | dictionary_size u8 |
  3 x (offset u64, length u64, crc32 u32) | header crc32

followed by the identity, pose and audio sections at their stated offsets.
The trailing header CRC covers everything before it, so a single flipped byte
anywhere in the file is attributable: header bytes to "header", payload bytes
to their section. Sections with nothing to code are omitted (offset 0,
length 0); a zero-frame, zero-audio stream is exactly header + identity.

The audio payload's alphabets (codebook size, residual levels) are format
constants shared with :mod:`avcc.audio`, not header fields; only the rates
that vary per stream travel in the header.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .audio import CODEBOOK_K, RESIDUAL_LEVELS, AudioTokenStream, _effective_levels
from .errors import CorruptionError, FormatError, InputError
from .rangecoder import decode_contexts, encode_contexts
from .video import IdentityCode, PoseCode, pose_levels

MAGIC = b"AVC1"
VERSION = 1
HEADER_BYTES = 94
_CRC_SPAN = HEADER_BYTES - 4
_ID_SCALE = 4096.0  # 16-bit fixed point over [-8, 8]
_SECTIONS = ("identity", "pose", "audio")


@dataclass(frozen=True)
class StreamMeta:
    """Header fields that vary per stream."""

    width: int
    height: int
    frame_count: int
    fps: float
    sample_rate: int
    audio_sample_count: int
    tokens_per_second: int
    ensemble_size: int
    pose_bits: int
    dictionary_size: int

    def __post_init__(self):
        if not 0 < self.width <= 0xFFFF or not 0 < self.height <= 0xFFFF:
            raise InputError("frame dimensions must fit u16 and be positive")
        if self.frame_count < 0 or self.audio_sample_count < 0:
            raise InputError("counts must be non-negative")
        if self.fps <= 0 or self.sample_rate <= 0:
            raise InputError("rates must be positive")
        if not 1 <= self.pose_bits <= 14:
            raise InputError("pose_bits must lie in [1, 14]")
        if not 1 <= self.tokens_per_second <= 255:
            raise InputError("tokens_per_second must fit u8 and be positive")
        if not 1 <= self.ensemble_size <= 255 or not 1 <= self.dictionary_size <= 255:
            raise InputError("ensemble and dictionary sizes must fit u8 and be positive")

    @property
    def duration(self) -> float:
        video = self.frame_count / self.fps if self.frame_count else 0.0
        sound = self.audio_sample_count / self.sample_rate
        return max(video, sound)


def _pack_header(meta: StreamMeta, table) -> bytes:
    head = MAGIC + struct.pack(
        "<HHHIfIIBBBB",
        VERSION,
        meta.width,
        meta.height,
        meta.frame_count,
        meta.fps,
        meta.sample_rate,
        meta.audio_sample_count,
        meta.tokens_per_second,
        meta.ensemble_size,
        meta.pose_bits,
        meta.dictionary_size,
    )
    for offset, length, crc in table:
        head += struct.pack("<QQI", offset, length, crc)
    return head + struct.pack("<I", zlib.crc32(head))


def _encode_identity(identity: IdentityCode) -> bytes:
    q = np.clip(np.round(np.clip(identity.latent, -8.0, 8.0) * _ID_SCALE), -32768, 32767)
    return q.astype("<i2").tobytes()


def _decode_identity(blob: bytes) -> IdentityCode:
    latent = np.frombuffer(blob, dtype="<i2").astype(np.float32) / np.float32(_ID_SCALE)
    return IdentityCode(latent, 0)


def _pose_layout(meta: StreamMeta):
    n = max(meta.frame_count - 1, 0)
    ctx = np.tile(np.arange(meta.dictionary_size, dtype=np.int64), n)
    return ctx, [pose_levels(meta.pose_bits)] * meta.dictionary_size


def _audio_layout(meta: StreamMeta, n_tokens):
    ctx = np.tile(np.arange(meta.ensemble_size + 1, dtype=np.int64), n_tokens)
    ks = [CODEBOOK_K] * meta.ensemble_size + [_effective_levels(RESIDUAL_LEVELS)]
    return ctx, ks


def mux(identity: IdentityCode, poses, audio: AudioTokenStream, meta: StreamMeta) -> bytes:
    """Serialize the three streams into one container byte string."""
    if len(poses) != max(meta.frame_count - 1, 0):
        raise InputError(f"{len(poses)} pose codes for frame_count {meta.frame_count}")
    for i, pose in enumerate(poses):
        if pose.coefficients.shape != (meta.dictionary_size,):
            raise InputError("pose code width does not match dictionary_size")
        if pose.frame_index != i + 1:
            raise InputError("pose codes must cover frames 1..N-1 in order")
        if pose.coefficients.size and pose.coefficients.max() >= pose_levels(meta.pose_bits):
            raise InputError("pose index exceeds the quantizer alphabet")
    if audio.semantic_tokens.shape[1] != meta.ensemble_size:
        raise InputError("audio ensemble width does not match header")
    if audio.tokens_per_second != meta.tokens_per_second:
        raise InputError("audio token rate does not match header")

    sections = {"identity": _encode_identity(identity)}
    if poses:
        ctx, ks = _pose_layout(meta)
        symbols = np.concatenate([p.coefficients for p in poses])
        sections["pose"] = encode_contexts(symbols, ctx, ks)
    if audio.n_tokens:
        ctx, ks = _audio_layout(meta, audio.n_tokens)
        interleaved = np.concatenate(
            [audio.semantic_tokens, audio.residual_tokens[:, None]], axis=1
        ).reshape(-1)
        sections["audio"] = encode_contexts(interleaved, ctx, ks)

    table = []
    offset = HEADER_BYTES
    body = b""
    for name in _SECTIONS:
        blob = sections.get(name, b"")
        if blob:
            table.append((offset, len(blob), zlib.crc32(blob)))
            offset += len(blob)
            body += blob
        else:
            table.append((0, 0, 0))
    return _pack_header(meta, table) + body


def _parse_header(blob: bytes):
    if len(blob) < 4:
        raise CorruptionError("container shorter than its magic")
    if blob[:4] != MAGIC:
        raise FormatError("not an AVCC container (bad magic)")
    if len(blob) < HEADER_BYTES:
        raise CorruptionError("container truncated inside the header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (stored,) = struct.unpack_from("<I", blob, _CRC_SPAN)
    if zlib.crc32(blob[:_CRC_SPAN]) != stored:
        raise CorruptionError("CRC mismatch in section 'header'")
    w, h, frames, fps, sr, samples, tps, ens, bits, dict_size = struct.unpack_from(
        "<HHIfIIBBBB", blob, 6
    )
    try:
        meta = StreamMeta(w, h, frames, fps, sr, samples, tps, ens, bits, dict_size)
    except InputError as exc:
        raise FormatError(f"invalid header field: {exc}") from exc
    table = [struct.unpack_from("<QQI", blob, 30 + 20 * i) for i in range(3)]
    return meta, table


def demux(blob: bytes):
    """Inverse of :func:`mux`: returns (identity, poses, audio, meta)."""
    meta, table = _parse_header(blob)
    expected = HEADER_BYTES
    for name, (offset, length, _) in zip(_SECTIONS, table):
        if length == 0:
            if offset != 0:
                raise CorruptionError(f"empty section '{name}' has a nonzero offset")
            continue
        if offset != expected:
            raise CorruptionError(f"section '{name}' offset {offset}, expected {expected}")
        expected += length
    if len(blob) != expected:
        raise CorruptionError(f"container is {len(blob)} bytes, layout requires {expected}")

    payloads = {}
    for name, (offset, length, crc) in zip(_SECTIONS, table):
        part = blob[offset : offset + length] if length else b""
        if length and zlib.crc32(part) != crc:
            raise CorruptionError(f"CRC mismatch in section '{name}'")
        payloads[name] = part

    if not payloads["identity"] or len(payloads["identity"]) % 2:
        raise CorruptionError("identity section missing or oddly sized")
    identity = _decode_identity(payloads["identity"])

    n_pose = max(meta.frame_count - 1, 0)
    poses = []
    if n_pose:
        if not payloads["pose"]:
            raise CorruptionError("header declares P-frames but the pose section is empty")
        ctx, ks = _pose_layout(meta)
        symbols = decode_contexts(payloads["pose"], ctx, ks)
        for i in range(n_pose):
            row = symbols[i * meta.dictionary_size : (i + 1) * meta.dictionary_size]
            poses.append(PoseCode(row, i + 1))
    elif payloads["pose"]:
        raise CorruptionError("pose section present for a stream without P-frames")

    width = meta.ensemble_size + 1
    if payloads["audio"]:
        if len(payloads["audio"]) < 4:
            raise CorruptionError("audio section shorter than its symbol count")
        (count,) = struct.unpack_from("<I", payloads["audio"], 0)
        if count == 0 or count % width:
            raise CorruptionError("audio symbol count does not tile the token layout")
        ctx, ks = _audio_layout(meta, count // width)
        symbols = decode_contexts(payloads["audio"], ctx, ks).reshape(-1, width)
        audio = AudioTokenStream(symbols[:, :-1], symbols[:, -1], meta.tokens_per_second)
    else:
        empty = np.zeros((0, meta.ensemble_size), dtype=np.int64)
        audio = AudioTokenStream(empty, np.zeros(0, dtype=np.int64), meta.tokens_per_second)
    return identity, poses, audio, meta


@dataclass(frozen=True)
class BitrateReport:
    total_kbps: float
    header_kbps: float
    identity_kbps: float
    pose_kbps: float
    audio_kbps: float
    duration: float
    section_bytes: dict


def measure_bitrate(blob: bytes, meta: StreamMeta = None) -> BitrateReport:
    """Per-section kbps over the stream duration declared in the header.

    The total is the float sum of the four parts, so the decomposition
    identity holds exactly rather than to rounding error.
    """
    parsed, table = _parse_header(blob)
    meta = meta or parsed
    duration = meta.duration
    if duration <= 0:
        raise InputError("cannot compute a bitrate for a zero-duration stream")
    kbps = lambda nbytes: 8.0 * nbytes / duration / 1000.0
    sizes = {name: length for name, (_, length, _) in zip(_SECTIONS, table)}
    sizes["header"] = HEADER_BYTES
    parts = [kbps(sizes[name]) for name in ("header",) + _SECTIONS]
    return BitrateReport(
        total_kbps=sum(parts),
        header_kbps=parts[0],
        identity_kbps=parts[1],
        pose_kbps=parts[2],
        audio_kbps=parts[3],
        duration=duration,
        section_bytes=sizes,
    )


def inspect(blob: bytes) -> dict:
    """Header fields and section sizes, for the CLI dump."""
    meta, table = _parse_header(blob)
    out = {
        "version": VERSION,
        "width": meta.width,
        "height": meta.height,
        "frame_count": meta.frame_count,
        "fps": round(meta.fps, 6),
        "sample_rate": meta.sample_rate,
        "audio_sample_count": meta.audio_sample_count,
        "tokens_per_second": meta.tokens_per_second,
        "ensemble_size": meta.ensemble_size,
        "pose_bits": meta.pose_bits,
        "dictionary_size": meta.dictionary_size,
        "total_bytes": len(blob),
    }
    for name, (offset, length, crc) in zip(_SECTIONS, table):
        out[f"{name}_offset"] = offset
        out[f"{name}_bytes"] = length
        out[f"{name}_crc32"] = f"{crc:08x}"
    return out
