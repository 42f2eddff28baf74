"""Acoustic front end: MFCC, sliding-window CMN, energy VAD and chunk excision."""

from __future__ import annotations

import logging
import wave as _wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DataError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")


@dataclass
class FrontendConfig:
    sample_rate: int = 8000
    frame_length_s: float = 0.025
    frame_shift_s: float = 0.010
    preemphasis: float = 0.97
    num_mel_bins: int = 30
    num_ceps: int = 30
    low_freq: float = 20.0
    high_freq: float = 0.0  # <= 0 means offset from Nyquist
    log_floor: float = 1e-10
    cmn_window_s: float = 3.0
    vad_dynamic_range_db: float = 15.0
    vad_offset_db: float = 0.0

    @property
    def frame_length(self):
        return int(round(self.frame_length_s * self.sample_rate))

    @property
    def frame_shift(self):
        return int(round(self.frame_shift_s * self.sample_rate))

    @property
    def fft_size(self):
        return 1 << (self.frame_length - 1).bit_length()

    @property
    def nyquist_high(self):
        return self.high_freq if self.high_freq > 0 else self.sample_rate / 2 + self.high_freq

    def validate(self):
        if self.sample_rate <= 0 or self.frame_length < 2 or self.frame_shift < 1:
            raise ConfigError("invalid framing parameters")
        if self.num_ceps > self.num_mel_bins:
            raise ConfigError("num_ceps cannot exceed num_mel_bins")
        if not 0 <= self.low_freq < self.nyquist_high <= self.sample_rate / 2:
            raise ConfigError("invalid mel filterbank frequency range")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")


def read_wav(path) -> Waveform:
    with _wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise DataError(f"{path}: only mono 16-bit PCM is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2") / 32768.0, rate)


def write_wav(path, wav: Waveform):
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())


def frame_signal(x, frame_length, frame_shift):
    n = len(x)
    if n < frame_length:
        return np.zeros((0, frame_length))
    count = 1 + (n - frame_length) // frame_shift
    idx = np.arange(frame_length)[None, :] + frame_shift * np.arange(count)[:, None]
    return x[idx]


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_center_frequencies(cfg: FrontendConfig):
    edges = np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(cfg.nyquist_high), cfg.num_mel_bins + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(cfg: FrontendConfig):
    """Triangular filters in the mel domain, shape (num_mel_bins, fft_size // 2 + 1)."""
    edges = np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(cfg.nyquist_high), cfg.num_mel_bins + 2)
    bins = hz_to_mel(np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _frames(wav: Waveform, cfg: FrontendConfig):
    cfg.validate()
    if wav.sample_rate != cfg.sample_rate:
        raise ConfigError(f"sample rate {wav.sample_rate} does not match config {cfg.sample_rate}")
    return frame_signal(wav.samples, cfg.frame_length, cfg.frame_shift)


def log_mel_energies(wav: Waveform, cfg: FrontendConfig | None = None):
    cfg = cfg or FrontendConfig()
    x = wav.samples
    emphasized = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]]) if len(x) else x
    frames = _frames(Waveform(emphasized, wav.sample_rate), cfg)
    if len(frames) == 0:
        return np.zeros((0, cfg.num_mel_bins))
    frames = frames * np.hamming(cfg.frame_length)[None, :]
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    return np.log(np.maximum(power @ mel_filterbank(cfg).T, cfg.log_floor))


def mfcc(wav: Waveform, cfg: FrontendConfig | None = None):
    cfg = cfg or FrontendConfig()
    fbank = log_mel_energies(wav, cfg)
    if len(fbank) == 0:
        return np.zeros((0, cfg.num_ceps))
    return dct(fbank, type=2, axis=1, norm="ortho")[:, : cfg.num_ceps]


def sliding_cmn(feats, window_s=3.0, frame_shift_s=0.010):
    """Subtract from every frame the mean of a centered window of up to ``window_s``.

    The window keeps its full length near the edges by shifting inward, so an
    utterance no longer than the window is normalized by its global mean.
    """
    feats = np.asarray(feats, dtype=np.float64)
    T = len(feats)
    if T == 0:
        return feats.copy()
    width = max(1, int(round(window_s / frame_shift_s)))
    if T <= width:
        return feats - feats.mean(axis=0, keepdims=True)
    t = np.arange(T)
    start = np.clip(t - width // 2, 0, T - width)
    end = start + width
    csum = np.concatenate([np.zeros((1, feats.shape[1])), np.cumsum(feats, axis=0)])
    means = (csum[end] - csum[start]) / width
    return feats - means


def frame_log_energy_db(wav: Waveform, cfg: FrontendConfig | None = None):
    cfg = cfg or FrontendConfig()
    frames = _frames(wav, cfg)
    energy = np.maximum((frames ** 2).sum(axis=1), cfg.log_floor)
    return 10.0 * np.log10(energy)


def energy_vad(wav: Waveform, cfg: FrontendConfig | None = None):
    """Keep frames whose energy exceeds the utterance energy level minus a dynamic range.

    The utterance level is the mean frame energy in the linear domain expressed
    in dB.  Frames at the log floor (digital silence) are always dropped.
    """
    cfg = cfg or FrontendConfig()
    energy_db = frame_log_energy_db(wav, cfg)
    if len(energy_db) == 0:
        return np.zeros(0, dtype=bool)
    level = 10.0 * np.log10(np.mean(10.0 ** (energy_db / 10.0)))
    floor_db = 10.0 * np.log10(cfg.log_floor)
    threshold = max(level - cfg.vad_dynamic_range_db + cfg.vad_offset_db, floor_db)
    return energy_db > threshold


def chunk_bounds(num_frames, min_frames, max_frames, rng):
    if min_frames < 1 or min_frames > max_frames:
        raise ConfigError("chunking needs 1 <= min <= max")
    bounds = []
    start = 0
    while num_frames - start >= min_frames:
        length = int(rng.integers(min_frames, max_frames + 1))
        length = min(length, num_frames - start)
        bounds.append((start, start + length))
        start += length
    return bounds


def chunk(feats, min_s=2.0, max_s=4.0, rng=None, frame_shift_s=0.010):
    """Contiguous random-length training chunks; a short remainder is dropped."""
    rng = rng if rng is not None else np.random.default_rng(0)
    min_f = int(round(min_s / frame_shift_s))
    max_f = int(round(max_s / frame_shift_s))
    bounds = chunk_bounds(len(feats), min_f, max_f, rng)
    if not bounds:
        log.warning("utterance of %d frames is shorter than the %d-frame minimum chunk",
                    len(feats), min_f)
    return [feats[a:b] for a, b in bounds]


def extract(wav: Waveform, cfg: FrontendConfig | None = None, apply_cmn=True, apply_vad=True):
    """MFCC -> sliding CMN -> VAD frame selection."""
    cfg = cfg or FrontendConfig()
    feats = mfcc(wav, cfg)
    if apply_cmn:
        feats = sliding_cmn(feats, cfg.cmn_window_s, cfg.frame_shift_s)
    if apply_vad and len(feats):
        feats = feats[energy_vad(wav, cfg)]
    return feats
