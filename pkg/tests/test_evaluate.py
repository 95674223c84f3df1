import xml.etree.ElementTree as ET

import numpy as np
import pytest

from avcc.corpus import CorpusClip, clip_spec, render_audio, render_video
from avcc.errors import CapabilityError, InputError
from avcc.evaluate import (
    ABLATION_COLUMNS,
    ClipMetrics,
    RDPoint,
    RDSurface,
    ablation_run,
    audio_distortion_by_tps,
    clip_metrics,
    correlation_by_band,
    format_table,
    per_clip_metrics,
    rd_surface,
    sync_score,
    video_distortion_by_bits,
)
from avcc.train import TrainConfig, train


@pytest.fixture(scope="module")
def clips():
    out = []
    for i in range(4):
        spec = clip_spec(640 + i)
        out.append(CorpusClip(spec, tuple(render_video(spec)), render_audio(spec)))
    return out


@pytest.fixture(scope="module")
def bundle_on(clips, tmp_path_factory):
    cfg = TrainConfig(steps=30, sync_steps=30, t_steps=8, seed=0)
    return train(clips, tmp_path_factory.mktemp("on"), cfg).bundle


@pytest.fixture(scope="module")
def bundle_off(clips, tmp_path_factory):
    cfg = TrainConfig(steps=30, sync_steps=30, t_steps=8, seed=0, cross_attention=False)
    return train(clips, tmp_path_factory.mktemp("off"), cfg).bundle


def test_rd_point_requires_positive_bitrate():
    with pytest.raises(InputError, match="positive"):
        RDPoint(bitrate_kbps=0.0, video={}, audio={}, label="x")


def test_rd_surface_rejects_incomplete_grid():
    point = RDPoint(1.0, {}, {}, "x")
    with pytest.raises(InputError, match="incomplete"):
        RDSurface((2, 4), (2,), {(2, 2): point}, {(2, 2): ()})


def test_sync_score_range_and_windows(clips, bundle_on):
    clip = clips[0]
    score = sync_score(clip.frames, clip.audio, bundle_on.sync)
    assert -1.0 <= score <= 1.0
    with pytest.raises(InputError, match="window"):
        sync_score(clip.frames[:2], clip.audio, bundle_on.sync)


def test_clip_metrics_fields(clips, bundle_on):
    m = clip_metrics(clips[0], bundle_on, pose_bits=6, tokens_per_second=4, seed=0)
    assert m.name == clips[0].spec.name
    assert m.bitrate_kbps > 0
    assert 0 < m.psnr_db <= 99
    assert m.mel_distance >= 0
    assert m.audio_quality == -m.mel_distance


def test_per_clip_metrics_order_and_determinism(clips, bundle_on):
    twice = [
        per_clip_metrics(clips[:2], bundle_on, pose_bits=6, tokens_per_second=4, seed=0)
        for _ in range(2)
    ]
    assert twice[0] == twice[1]
    assert [m.name for m in twice[0]] == [c.spec.name for c in clips[:2]]


def test_ablation_rows_and_rate_parity(clips, bundle_on, bundle_off, tmp_path):
    csv_path = tmp_path / "ablation.csv"
    rows = ablation_run(clips[:2], bundle_on, bundle_off, tps_list=(2, 4, 8),
                        pose_bits=6, csv_path=csv_path)
    assert len(rows) == 6
    for tps in (2, 4, 8):
        pair = [r for r in rows if r["tokens_per_second"] == tps]
        assert {r["variant"] for r in pair} == {"cross_attn", "no_cross_attn"}
        a, b = (r["bitrate_kbps"] for r in pair)
        assert abs(a - b) / max(a, b) < 0.01
    header = csv_path.read_text().splitlines()[0]
    assert header == ",".join(ABLATION_COLUMNS)
    assert len(csv_path.read_text().splitlines()) == 7


def test_ablation_rejects_mismatched_variants(clips, bundle_on, bundle_off):
    with pytest.raises(InputError, match="cross-attention"):
        ablation_run(clips[:1], bundle_off, bundle_on)
    with pytest.raises(InputError, match="cross-attention"):
        ablation_run(clips[:1], bundle_on, bundle_on)


def test_format_table_alignment():
    rows = [
        {"tokens_per_second": 2, "variant": "cross_attn", "bitrate_kbps": 1.25,
         "psnr_db": 14.3, "sync_score": 0.1, "mel_distance": 8.0},
    ]
    text = format_table(rows)
    lines = text.splitlines()
    assert len(lines) == 2
    assert lines[0].split()[:2] == ["tokens_per_second", "variant"]
    assert "1.2500" in lines[1]


def test_rd_surface_grid_and_exports(clips, bundle_on, tmp_path):
    surface = rd_surface(clips[:2], bundle_on, pose_bits_list=(2, 6), tps_list=(2, 8),
                         out_dir=tmp_path)
    assert set(surface.cells) == {(2, 2), (2, 8), (6, 2), (6, 8)}
    assert all(len(v) == 2 for v in surface.per_clip.values())
    cells_csv = (tmp_path / "rd_surface.csv").read_text().splitlines()
    assert len(cells_csv) == 5
    clips_csv = (tmp_path / "rd_surface_clips.csv").read_text().splitlines()
    assert len(clips_csv) == 9
    svg = (tmp_path / "rd_surface.svg").read_text()
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert "mel distance" in svg


def test_rd_surface_requires_codebooks(clips, bundle_on):
    from avcc.codec import new_bundle

    untrained = new_bundle(0, t_steps=8)
    with pytest.raises(CapabilityError, match="train"):
        rd_surface(clips[:1], untrained)


def test_correlation_by_band_shape(clips, bundle_on):
    surface = rd_surface(clips, bundle_on, pose_bits_list=(2, 6), tps_list=(2, 8))
    bands = correlation_by_band(surface, bands=2)
    assert 1 <= len(bands) <= 2
    rates = [b[0] for b in bands]
    assert rates == sorted(rates)
    for _, corr, n in bands:
        assert -1.0 <= corr <= 1.0
        assert n >= 3


def test_distortion_sweeps(clips, bundle_on):
    video = video_distortion_by_bits(clips[:2], bundle_on, pose_bits_list=(2, 8))
    assert set(video) == {2, 8}
    assert all(v > 0 for v in video.values())
    audio = audio_distortion_by_tps(clips[:2], bundle_on, tps_list=(2, 8))
    assert set(audio) == {2, 8}
    assert audio[8] <= audio[2]
