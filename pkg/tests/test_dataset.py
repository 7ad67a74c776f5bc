import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gramnoise.dataset import (AudioAsset, DataError, DegenerateFrameError, MalformedWavError, NormalizationSettings,
                               UnsupportedWavError, batch_iterator, frame_length, median_rms, normalization_scale,
                               normalize_median_rms, random_chunk, read_manifest, read_wav, write_manifest, write_wav)


def _wav_bytes(code, channels, fs, bits, payload):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", code, channels, fs, fs * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_float_roundtrip_is_exact(tmp_path, rng):
    x = rng.standard_normal(1001).astype(np.float32)
    write_wav(tmp_path / "a.wav", AudioAsset(x, 8000))
    back = read_wav(tmp_path / "a.wav")
    assert back.fs == 8000 and back.samples.dtype == np.float32
    np.testing.assert_array_equal(back.samples, x)


def test_pcm16_full_scale(tmp_path):
    square = np.tile(np.array([32767, -32767], dtype="<i2"), 50)
    (tmp_path / "sq.wav").write_bytes(_wav_bytes(1, 1, 1000, 16, square.tobytes()))
    x = read_wav(tmp_path / "sq.wav").samples
    assert set(np.unique(x).tolist()) == {-32767 / 32768, 32767 / 32768}


def test_pcm16_writer_roundtrip(tmp_path):
    x = np.array([0.0, 0.5, -0.5, 32767 / 32768], dtype=np.float32)
    write_wav(tmp_path / "p.wav", AudioAsset(x, 1000), pcm16=True)
    np.testing.assert_array_equal(read_wav(tmp_path / "p.wav").samples, x)


def test_stereo_is_downmixed(tmp_path):
    frames = np.array([[0.5, -0.5], [1.0, 0.0]], dtype="<f4")
    (tmp_path / "st.wav").write_bytes(_wav_bytes(3, 2, 1000, 32, frames.tobytes()))
    np.testing.assert_array_equal(read_wav(tmp_path / "st.wav").samples, [0.0, 0.5])


def test_truncated_file_is_malformed(tmp_path, rng):
    write_wav(tmp_path / "a.wav", AudioAsset(rng.standard_normal(100).astype(np.float32), 8000))
    data = (tmp_path / "a.wav").read_bytes()
    (tmp_path / "t.wav").write_bytes(data[:-17])
    with pytest.raises(MalformedWavError):
        read_wav(tmp_path / "t.wav")
    (tmp_path / "h.wav").write_bytes(data[:10])
    with pytest.raises(MalformedWavError):
        read_wav(tmp_path / "h.wav")


def test_unsupported_codec(tmp_path):
    (tmp_path / "u.wav").write_bytes(_wav_bytes(1, 1, 1000, 8, bytes(10)))
    with pytest.raises(UnsupportedWavError):
        read_wav(tmp_path / "u.wav")


@pytest.mark.parametrize("fs,rpm,n", [(44100, 78, 33923), (8000, 78, 6154), (1000, 60, 1000)])
def test_frame_length_examples(fs, rpm, n):
    assert frame_length(fs, rpm) == n


@given(st.integers(1000, 384_000))
def test_frame_duration_within_half_sample_of_revolution(fs):
    assert abs(frame_length(fs) / fs - 60 / 78) <= 0.5 / fs + 1e-15


def test_frame_duration_window():
    # rounding to whole samples pushes a few rates below 0.769 s; none above 1987 Hz
    assert all(0.769 <= frame_length(fs) / fs <= 0.770 for fs in range(1988, 200_000))
    assert frame_length(1181) / 1181 < 0.769


def test_consistent_normalization_gives_unit_std(rng):
    x = rng.standard_normal(1_000_000)
    y = normalize_median_rms(x, NormalizationSettings(gain_db=0.0))
    assert y.std() == pytest.approx(1.0, abs=0.02)


def test_constant_frame_scale():
    s = NormalizationSettings(gain_db=-10.0)
    assert normalization_scale(np.full(10, 0.25), s) == pytest.approx(10 ** (-0.5) / (1.4826 * 0.25), rel=1e-12)


def test_literal_mode_uses_additive_denominator(rng):
    x = rng.standard_normal(1_000_000)
    s = NormalizationSettings(gain_db=0.0, mode="literal")
    assert normalization_scale(x, s) == 1.0 / math.sqrt(1.4826 ** 2 + float(np.median(x * x)))
    assert normalization_scale(x, s) == pytest.approx(1 / 1.629, abs=1e-3)
    # the two modes disagree by a large factor on Gaussian input
    assert normalization_scale(x, NormalizationSettings(gain_db=0.0)) / normalization_scale(x, s) > 1.5


@settings(max_examples=40)
@given(st.floats(1e-3, 1e3), st.integers(0, 2 ** 32 - 1))
def test_normalization_is_scale_invariant_and_idempotent(c, seed):
    x = np.random.default_rng(seed).standard_normal(257)
    s = NormalizationSettings()
    y = normalize_median_rms(x, s)
    np.testing.assert_allclose(normalize_median_rms(c * x, s), y, rtol=1e-9)
    assert normalization_scale(y, s) == pytest.approx(1.0, abs=1e-9)
    assert median_rms(y) == pytest.approx(s.gain, rel=1e-9)


def test_silent_frame_is_degenerate():
    with pytest.raises(DegenerateFrameError):
        normalize_median_rms(np.zeros(16))


def test_random_chunk_examples(rng):
    asset = AudioAsset(np.arange(10.0), 100)
    np.testing.assert_array_equal(random_chunk(asset, 10, rng), asset.samples)
    a = random_chunk(asset, 4, np.random.default_rng(2))
    b = random_chunk(asset, 4, np.random.default_rng(2))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(DataError):
        random_chunk(asset, 11, rng)


def test_random_chunk_offsets_are_uniform():
    asset = AudioAsset(np.arange(50.0), 100)
    rng = np.random.default_rng(0)
    starts = [int(random_chunk(asset, 41, rng)[0]) for _ in range(100_000)]
    counts = np.bincount(starts, minlength=10)
    assert len(counts) == 10
    assert stats.chisquare(counts).pvalue > 0.01


def test_batch_iterator_single_asset(rng):
    x = rng.standard_normal(300)
    it = batch_iterator([AudioAsset(x, 100)], 300, 1, NormalizationSettings(), rng)
    for _ in range(3):
        b = next(it)
        assert b.shape == (1, 300)
        np.testing.assert_allclose(b[0], normalize_median_rms(x), rtol=1e-12)


def test_batches_hit_target_gain(rng):
    corpus = [AudioAsset(rng.standard_normal(500) * (i + 1), 100) for i in range(3)]
    s = NormalizationSettings(gain_db=-10.0)
    it = batch_iterator(corpus, 64, 8, s, np.random.default_rng(1))
    for _ in range(5):
        for frame in next(it):
            assert median_rms(frame) == pytest.approx(s.gain, abs=1e-9)


def test_batch_iterator_is_seeded(rng):
    corpus = [AudioAsset(rng.standard_normal(500), 100, f"{i}") for i in range(3)]
    a = batch_iterator(corpus, 50, 4, NormalizationSettings(), np.random.default_rng(9))
    b = batch_iterator(corpus, 50, 4, NormalizationSettings(), np.random.default_rng(9))
    for _ in range(4):
        np.testing.assert_array_equal(next(a), next(b))


def test_batch_iterator_skips_silence(caplog):
    x = np.zeros(200)
    x[100:] = np.random.default_rng(0).standard_normal(100)
    it = batch_iterator([AudioAsset(x, 100, "half")], 100, 4, NormalizationSettings(), np.random.default_rng(0))
    batch = next(it)
    assert np.all(np.isfinite(batch))
    assert "skipping silent chunk" in caplog.text


def test_batch_iterator_errors(rng):
    with pytest.raises(DataError):
        next(batch_iterator([], 10, 1, NormalizationSettings(), rng))
    with pytest.raises(DataError):
        next(batch_iterator([AudioAsset(np.ones(5), 100)], 10, 1, NormalizationSettings(), rng))


def test_manifest_roundtrip(tmp_path, rng):
    (tmp_path / "sub").mkdir()
    paths = []
    for i in range(2):
        p = tmp_path / "sub" / f"{i}.wav"
        write_wav(p, AudioAsset(rng.standard_normal(50).astype(np.float32), 8000))
        paths.append(p)
    write_manifest(tmp_path / "corpus.txt", paths)
    assets = read_manifest(tmp_path / "corpus.txt", fs=8000)
    assert [len(a) for a in assets] == [50, 50]
    with pytest.raises(DataError, match="sample rate"):
        read_manifest(tmp_path / "corpus.txt", fs=16000)


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path / "none.txt")
    (tmp_path / "m.txt").write_text("# only a comment\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "m.txt")
    (tmp_path / "m.txt").write_text("missing.wav\n")
    with pytest.raises(DataError, match="m.txt:1"):
        read_manifest(tmp_path / "m.txt")


def test_asset_validation():
    with pytest.raises(DataError):
        AudioAsset(np.zeros((2, 2)), 100)
    with pytest.raises(DataError):
        AudioAsset(np.array([np.nan]), 100)
