"""Container mux/demux, corruption attribution, and bitrate accounting."""

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avcc import container
from avcc.audio import AudioTokenStream
from avcc.container import (
    HEADER_BYTES,
    BitrateReport,
    StreamMeta,
    demux,
    inspect,
    measure_bitrate,
    mux,
)
from avcc.errors import CorruptionError, FormatError, InputError
from avcc.video import IdentityCode, PoseCode


def make_meta(frames=21, samples=32000, bits=6, m=16, ens=2, tps=4, fps=12.5):
    return StreamMeta(64, 64, frames, fps, 16000, samples, tps, ens, bits, m)


def make_streams(meta, seed=0):
    rng = np.random.default_rng(seed)
    ident = IdentityCode(rng.normal(scale=2.0, size=64).astype(np.float32), 0)
    levels = (1 << meta.pose_bits) - 1
    poses = [
        PoseCode(rng.integers(0, levels, size=meta.dictionary_size).astype(np.int64), i + 1)
        for i in range(max(meta.frame_count - 1, 0))
    ]
    n_tok = int(round(meta.audio_sample_count / meta.sample_rate * meta.tokens_per_second))
    audio = AudioTokenStream(
        rng.integers(0, 256, size=(n_tok, meta.ensemble_size)).astype(np.int64),
        rng.integers(0, 15, size=n_tok).astype(np.int64),
        meta.tokens_per_second,
    )
    return ident, poses, audio


def test_degenerate_container_is_header_plus_identity():
    meta = make_meta(frames=0, samples=0)
    ident, poses, audio = make_streams(meta)
    blob = mux(ident, poses, audio, meta)
    assert len(blob) == HEADER_BYTES + 2 * 64 == 222
    got_i, got_p, got_a, got_m = demux(blob)
    assert got_p == [] and got_a.n_tokens == 0 and got_m == meta
    assert got_i.latent.shape == (64,)


def test_round_trip_exact_tokens_and_meta():
    meta = make_meta()
    ident, poses, audio = make_streams(meta, seed=3)
    got_i, got_p, got_a, got_m = demux(mux(ident, poses, audio, meta))
    assert got_m == meta
    assert len(got_p) == 20
    for want, got in zip(poses, got_p):
        assert got.frame_index == want.frame_index
        assert np.array_equal(got.coefficients, want.coefficients)
    assert np.array_equal(got_a.semantic_tokens, audio.semantic_tokens)
    assert np.array_equal(got_a.residual_tokens, audio.residual_tokens)
    assert got_a.tokens_per_second == audio.tokens_per_second


def test_identity_fixed_point_error_bound():
    meta = make_meta(frames=0, samples=0)
    ident, poses, audio = make_streams(meta, seed=7)
    got_i, _, _, _ = demux(mux(ident, poses, audio, meta))
    assert np.abs(got_i.latent - ident.latent).max() <= 0.5 / 4096 + 1e-9
    # the int16 grid covers [-8, 8): +8 itself rounds down one step
    exact = IdentityCode(np.array([1.0, -1.0, 0.0, 7.0, -8.0] + [0.0] * 59, dtype=np.float32), 0)
    got_i, _, _, _ = demux(mux(exact, poses, audio, meta))
    assert np.array_equal(got_i.latent, exact.latent)


def test_identity_values_clamp_to_eight():
    meta = make_meta(frames=0, samples=0)
    big = IdentityCode(np.array([9.0, -123.0] + [0.0] * 62, dtype=np.float32), 0)
    got_i, _, _, _ = demux(mux(big, [], make_streams(meta)[2], meta))
    assert got_i.latent[0] == pytest.approx(8.0, abs=1e-3)
    assert got_i.latent[1] == pytest.approx(-8.0, abs=1e-3)


def test_static_pose_section_stays_small():
    meta = make_meta(frames=51, samples=0)
    ident = make_streams(meta)[0]
    poses = [PoseCode(np.full(16, 31, dtype=np.int64), i + 1) for i in range(50)]
    audio = AudioTokenStream(np.zeros((0, 2), np.int64), np.zeros(0, np.int64), 4)
    info = inspect(mux(ident, poses, audio, meta))
    assert info["pose_bytes"] <= 64  # raw payload would be 600 bytes at 6 bits
    got = demux(mux(ident, poses, audio, meta))[1]
    assert all(np.array_equal(p.coefficients, np.full(16, 31)) for p in got)


@settings(max_examples=40, deadline=None)
@given(
    frames=st.integers(0, 5),
    n_tok=st.integers(0, 6),
    bits=st.integers(1, 8),
    m=st.integers(1, 8),
    ens=st.integers(1, 3),
    seed=st.integers(0, 2**16),
)
def test_round_trip_property(frames, n_tok, bits, m, ens, seed):
    rng = np.random.default_rng(seed)
    meta = StreamMeta(64, 64, frames, 12.5, 16000, n_tok * 4000, 4, ens, bits, m)
    ident = IdentityCode(rng.normal(size=64).astype(np.float32), 0)
    levels = (1 << bits) - 1
    poses = [
        PoseCode(rng.integers(0, levels, size=m).astype(np.int64), i + 1)
        for i in range(max(frames - 1, 0))
    ]
    audio = AudioTokenStream(
        rng.integers(0, 256, size=(n_tok, ens)).astype(np.int64),
        rng.integers(0, 15, size=n_tok).astype(np.int64),
        4,
    )
    got_i, got_p, got_a, got_m = demux(mux(ident, poses, audio, meta))
    assert got_m == meta
    assert all(np.array_equal(a.coefficients, b.coefficients) for a, b in zip(got_p, poses))
    assert np.array_equal(got_a.semantic_tokens, audio.semantic_tokens)
    assert np.array_equal(got_a.residual_tokens, audio.residual_tokens)


def test_every_single_byte_flip_is_detected_and_attributed():
    meta = make_meta(frames=6, samples=8000)
    blob = bytearray(mux(*make_streams(meta, seed=1), meta))
    info = inspect(bytes(blob))
    spans = {
        name: range(info[f"{name}_offset"], info[f"{name}_offset"] + info[f"{name}_bytes"])
        for name in ("identity", "pose", "audio")
    }
    for i in range(len(blob)):
        damaged = bytes(blob[:i]) + bytes([blob[i] ^ 0xFF]) + bytes(blob[i + 1 :])
        if i < 6:  # magic or version field: rejected before the CRC runs
            with pytest.raises(FormatError):
                demux(damaged)
            continue
        with pytest.raises(CorruptionError) as err:
            demux(damaged)
        if i < HEADER_BYTES:
            assert "header" in str(err.value)
        else:
            name = next(n for n, span in spans.items() if i in span)
            assert name in str(err.value)


def test_truncation_and_trailing_bytes_are_corruption():
    meta = make_meta()
    blob = mux(*make_streams(meta), meta)
    for bad in (blob[:-1], blob[:50], blob[:3], blob + b"\0"):
        with pytest.raises(CorruptionError):
            demux(bad)


def test_bad_magic_is_format_error():
    with pytest.raises(FormatError):
        demux(b"RIFF" + bytes(200))


def test_future_version_is_format_error_without_partial_parse():
    meta = make_meta()
    blob = bytearray(mux(*make_streams(meta), meta))
    struct.pack_into("<H", blob, 4, 2)
    struct.pack_into("<I", blob, HEADER_BYTES - 4, zlib.crc32(bytes(blob[: HEADER_BYTES - 4])))
    with pytest.raises(FormatError, match="version"):
        demux(bytes(blob))


def test_shuffled_section_offsets_are_rejected():
    meta = make_meta()
    blob = bytearray(mux(*make_streams(meta), meta))
    pose = struct.unpack_from("<QQI", blob, 50)
    audio = struct.unpack_from("<QQI", blob, 70)
    struct.pack_into("<QQI", blob, 50, *audio)
    struct.pack_into("<QQI", blob, 70, *pose)
    struct.pack_into("<I", blob, HEADER_BYTES - 4, zlib.crc32(bytes(blob[: HEADER_BYTES - 4])))
    with pytest.raises(CorruptionError):
        demux(bytes(blob))


def test_bitrate_decomposition_is_exact():
    meta = make_meta()  # video 1.6 s, audio 2.0 s: duration is the max
    blob = mux(*make_streams(meta), meta)
    rep = measure_bitrate(blob)
    assert isinstance(rep, BitrateReport)
    assert rep.duration == 2.0
    assert rep.total_kbps == rep.header_kbps + rep.identity_kbps + rep.pose_kbps + rep.audio_kbps
    assert rep.total_kbps == pytest.approx(8.0 * len(blob) / 2.0 / 1000.0, rel=1e-12)
    assert rep.header_kbps == 8.0 * HEADER_BYTES / 2.0 / 1000.0
    assert sum(rep.section_bytes.values()) == len(blob)


def test_bitrate_kbps_formula():
    # 1250 bytes over one second is 10 kbps by definition
    assert 8.0 * 1250 / 1.0 / 1000.0 == 10.0
    meta = make_meta(frames=0, samples=16000)
    blob = mux(*make_streams(meta), meta)
    rep = measure_bitrate(blob)
    assert rep.duration == 1.0
    assert rep.identity_kbps == 8.0 * 128 / 1.0 / 1000.0


def test_zero_duration_bitrate_is_input_error():
    meta = make_meta(frames=0, samples=0)
    blob = mux(*make_streams(meta), meta)
    with pytest.raises(InputError):
        measure_bitrate(blob)


def test_mux_validates_stream_shapes():
    meta = make_meta()
    ident, poses, audio = make_streams(meta)
    with pytest.raises(InputError):
        mux(ident, poses[:-1], audio, meta)
    with pytest.raises(InputError):
        mux(ident, [PoseCode(np.zeros(5, np.int64), i + 1) for i in range(20)], audio, meta)
    hot = [PoseCode(np.full(16, 63, np.int64), i + 1) for i in range(20)]
    with pytest.raises(InputError):
        mux(ident, hot, audio, meta)  # 63 is out of range at six bits
    shuffled = [PoseCode(p.coefficients, 20 - i) for i, p in enumerate(poses)]
    with pytest.raises(InputError):
        mux(ident, shuffled, audio, meta)
    wide = AudioTokenStream(
        np.zeros((8, 3), np.int64), np.zeros(8, np.int64), meta.tokens_per_second
    )
    with pytest.raises(InputError):
        mux(ident, poses, wide, meta)
    slow = AudioTokenStream(audio.semantic_tokens, audio.residual_tokens, 2)
    with pytest.raises(InputError):
        mux(ident, poses, slow, meta)


def test_meta_field_validation():
    good = dict(
        width=64, height=64, frame_count=10, fps=12.5, sample_rate=16000,
        audio_sample_count=16000, tokens_per_second=4, ensemble_size=2,
        pose_bits=6, dictionary_size=16,
    )
    for field, value in [
        ("width", 0), ("height", 70000), ("frame_count", -1), ("fps", 0.0),
        ("sample_rate", 0), ("audio_sample_count", -5), ("tokens_per_second", 0),
        ("ensemble_size", 0), ("pose_bits", 0), ("pose_bits", 15),
        ("dictionary_size", 256),
    ]:
        with pytest.raises(InputError):
            StreamMeta(**{**good, field: value})


def test_inspect_reports_fields_and_sections():
    meta = make_meta()
    blob = mux(*make_streams(meta), meta)
    info = inspect(blob)
    assert info["version"] == 1
    assert info["frame_count"] == 21 and info["tokens_per_second"] == 4
    assert info["total_bytes"] == len(blob)
    assert info["identity_offset"] == HEADER_BYTES and info["identity_bytes"] == 128
    assert info["pose_offset"] == HEADER_BYTES + 128
    assert info["audio_offset"] == info["pose_offset"] + info["pose_bytes"]
    assert len(info["pose_crc32"]) == 8
    assert info["total_bytes"] == HEADER_BYTES + 128 + info["pose_bytes"] + info["audio_bytes"]


def test_fps_survives_f32_storage():
    meta = make_meta(fps=29.97)
    _, _, _, got = demux(mux(*make_streams(meta), meta))
    assert got.fps == pytest.approx(29.97, rel=1e-6)
    assert got.fps == float(np.float32(29.97))
    exact = make_meta(fps=12.5)
    _, _, _, got = demux(mux(*make_streams(exact), exact))
    assert got.fps == 12.5
