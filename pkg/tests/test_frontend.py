import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from attrxvec import frontend as fe
from attrxvec.errors import ConfigError, DataError

from oracles import direct_dct_ortho, direct_dft_power, direct_sliding_cmn

CFG = fe.FrontendConfig()


def tone(freq, seconds=0.5, amp=0.3, rate=8000, phase=0.0):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * math.pi * freq * t + phase)


def oracle_filterbank(cfg):
    """Triangles in the mel domain, built with scalar math."""
    mel = lambda f: 1127.0 * math.log(1.0 + f / 700.0)
    lo, hi = mel(cfg.low_freq), mel(cfg.sample_rate / 2)
    edges = [lo + (hi - lo) * i / (cfg.num_mel_bins + 1) for i in range(cfg.num_mel_bins + 2)]
    n_bins = cfg.fft_size // 2 + 1
    fb = np.zeros((cfg.num_mel_bins, n_bins))
    for j in range(cfg.num_mel_bins):
        a, b, c = edges[j], edges[j + 1], edges[j + 2]
        for k in range(n_bins):
            m = mel(k * cfg.sample_rate / cfg.fft_size)
            if a < m <= b:
                fb[j, k] = (m - a) / (b - a)
            elif b < m < c:
                fb[j, k] = (c - m) / (c - b)
    return fb


def test_defaults_follow_telephone_setup():
    assert (CFG.sample_rate, CFG.frame_length, CFG.frame_shift) == (8000, 200, 80)
    assert CFG.num_ceps == 30 and CFG.fft_size == 256


def test_mfcc_dimension_and_frame_count():
    x = np.random.default_rng(0).normal(scale=0.1, size=8000)
    feats = fe.mfcc(fe.Waveform(x, 8000))
    assert feats.shape == (1 + (8000 - 200) // 80, 30)
    assert np.all(np.isfinite(feats))


def test_silence_gives_identical_frames():
    feats = fe.mfcc(fe.Waveform(np.zeros(4000), 8000))
    assert len(feats) > 0
    assert np.all(feats == feats[0])


def test_short_input_gives_empty_matrix():
    assert fe.mfcc(fe.Waveform(np.zeros(100), 8000)).shape == (0, 30)


def test_sample_rate_mismatch():
    with pytest.raises(ConfigError):
        fe.mfcc(fe.Waveform(np.zeros(16000), 16000))


def test_invalid_waveform():
    with pytest.raises(DataError):
        fe.Waveform(np.array([0.0, np.nan]), 8000)
    with pytest.raises(DataError):
        fe.Waveform(np.zeros(3), 0)


def test_filterbank_matches_scalar_construction():
    np.testing.assert_allclose(fe.mel_filterbank(CFG), oracle_filterbank(CFG), atol=1e-12)


def test_log_mel_matches_direct_dft():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=0.2, size=1200)
    got = fe.log_mel_energies(fe.Waveform(x, 8000), CFG)
    emph = np.concatenate([[x[0]], x[1:] - 0.97 * x[:-1]])
    window = np.array([0.54 - 0.46 * math.cos(2 * math.pi * n / 199) for n in range(200)])
    fb = oracle_filterbank(CFG)
    for t in (0, 3, len(got) - 1):
        frame = emph[80 * t: 80 * t + 200] * window
        expected = np.log(np.maximum(fb @ direct_dft_power(frame, 256), 1e-10))
        np.testing.assert_allclose(got[t], expected, rtol=1e-9, atol=1e-9)


def test_mfcc_is_dct_of_log_mel():
    x = np.random.default_rng(2).normal(scale=0.2, size=2000)
    wav = fe.Waveform(x, 8000)
    np.testing.assert_allclose(fe.mfcc(wav), direct_dct_ortho(fe.log_mel_energies(wav))[:, :30],
                               atol=1e-9)


@pytest.mark.parametrize("j", [5, 12, 20])
def test_tone_at_filter_center_dominates_neighbours(j):
    center = fe.mel_center_frequencies(CFG)[j]
    logmel = fe.log_mel_energies(fe.Waveform(tone(center), 8000)).mean(axis=0)
    assert logmel[j] > logmel[j - 1] and logmel[j] > logmel[j + 1]
    assert int(np.argmax(logmel)) == j


@given(arrays(np.float64, st.integers(200, 1200), elements=st.floats(-1, 1)))
@settings(max_examples=25, deadline=None)
def test_mfcc_always_finite(samples):
    assert np.all(np.isfinite(fe.mfcc(fe.Waveform(samples, 8000))))


# -- CMN -----------------------------------------------------------------------------


def test_cmn_short_utterance_subtracts_global_mean():
    x = np.random.default_rng(3).normal(size=(120, 4)) + 5
    out = fe.sliding_cmn(x, 3.0)
    np.testing.assert_allclose(out, x - x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)


def test_cmn_constant_input_zero():
    np.testing.assert_allclose(fe.sliding_cmn(np.full((700, 3), 2.5), 3.0), 0, atol=1e-12)


@pytest.mark.parametrize("length", [301, 450, 1000])
def test_cmn_matches_direct_loop(length):
    x = np.random.default_rng(length).normal(size=(length, 5)) * 3 + np.linspace(0, 10, length)[:, None]
    np.testing.assert_allclose(fe.sliding_cmn(x, 3.0), direct_sliding_cmn(x, 300), atol=1e-9)


def test_cmn_idempotent_on_zero_mean_windows():
    x = np.tile([[1.0, -2.0], [-1.0, 2.0]], (450, 1))
    np.testing.assert_allclose(fe.sliding_cmn(x, 3.0), x, atol=1e-10)


def test_cmn_empty():
    assert fe.sliding_cmn(np.zeros((0, 3))).shape == (0, 3)


# -- VAD -----------------------------------------------------------------------------


def test_vad_all_silence_dropped():
    mask = fe.energy_vad(fe.Waveform(np.zeros(4000), 8000))
    assert mask.shape == (48,) and not mask.any()


def test_vad_loud_everywhere_kept():
    mask = fe.energy_vad(fe.Waveform(tone(440, 1.0), 8000))
    assert mask.all()


def test_vad_half_silence_half_tone():
    rng = np.random.default_rng(5)
    quiet = 0.003 * rng.normal(size=8000)
    loud = tone(1000, 1.0, amp=0.3) + 0.003 * rng.normal(size=8000)
    # tone power 0.045 against noise power 9e-6: well over 20 dB apart
    wav = fe.Waveform(np.concatenate([quiet, loud]), 8000)
    mask = fe.energy_vad(wav)
    starts = np.arange(len(mask)) * 80
    in_quiet = starts + 200 <= 8000
    in_loud = starts >= 8000
    assert not mask[in_quiet].any()
    assert mask[in_loud].all()
    kept = np.flatnonzero(mask)
    assert np.all(np.diff(kept) == 1)
    assert (~in_quiet & ~in_loud).sum() <= 2


def test_vad_tone_only_20db_above_noise():
    rng = np.random.default_rng(6)
    noise_amp = 0.01
    tone_amp = noise_amp * math.sqrt(2) * 10  # sine power = amp^2 / 2, +20 dB
    x = np.concatenate([noise_amp * rng.normal(size=8000),
                        tone(500, 1.0, amp=tone_amp) + noise_amp * rng.normal(size=8000)])
    mask = fe.energy_vad(fe.Waveform(x, 8000))
    starts = np.arange(len(mask)) * 80
    assert not mask[starts + 200 <= 8000].any()
    assert mask[starts >= 8000].all()


def test_extract_applies_vad_and_cmn():
    x = np.concatenate([np.zeros(8000), tone(700, 1.0)])
    wav = fe.Waveform(x, 8000)
    feats = fe.extract(wav)
    assert len(feats) == int(fe.energy_vad(wav).sum())
    raw = fe.extract(wav, apply_cmn=False, apply_vad=False)
    assert raw.shape == fe.mfcc(wav).shape


# -- chunks --------------------------------------------------------------------------


def test_chunks_of_ten_seconds_within_bounds():
    feats = np.zeros((1000, 3))
    chunks = fe.chunk(feats, 2.0, 4.0, np.random.default_rng(0))
    assert chunks
    assert all(200 <= len(c) <= 400 for c in chunks)
    assert sum(len(c) for c in chunks) <= 1000


def test_chunks_are_contiguous_slices():
    feats = np.arange(3000.0)[:, None]
    for c in fe.chunk(feats, 2.0, 4.0, np.random.default_rng(1)):
        assert np.all(np.diff(c[:, 0]) == 1)


def test_short_utterance_no_chunks(caplog):
    with caplog.at_level(logging.WARNING, logger="attrxvec.frontend"):
        assert fe.chunk(np.zeros((100, 3)), 2.0, 4.0, np.random.default_rng(0)) == []
    assert "shorter" in caplog.text


def test_chunking_is_seeded():
    a = fe.chunk_bounds(5000, 200, 400, np.random.default_rng(9))
    b = fe.chunk_bounds(5000, 200, 400, np.random.default_rng(9))
    assert a == b


def test_chunk_invalid_bounds():
    with pytest.raises(ConfigError):
        fe.chunk_bounds(1000, 400, 200, np.random.default_rng(0))


# -- wave I/O ------------------------------------------------------------------------


def test_wav_round_trip(tmp_path):
    x = np.round(tone(300, 0.2) * 32768) / 32768
    fe.write_wav(tmp_path / "a.wav", fe.Waveform(x, 8000))
    back = fe.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    np.testing.assert_array_equal(back.samples, x)
