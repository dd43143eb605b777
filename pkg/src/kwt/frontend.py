"""MFCC front-end: 1 s, 16 kHz waveform -> 98 x 40 feature matrix.

Pipeline: frame (30 ms window / 10 ms stride) -> Hann window -> 512-point
magnitude spectrum -> 40 triangular mel filters (HTK scale, 20-7600 Hz) ->
log with a 1e-12 floor -> orthonormal DCT-II keeping the first 40
coefficients. Everything is deterministic and pure.
"""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct

from .errors import ConfigurationError, InputError

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000  # fixed 1 s contract


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)


@dataclass
class MfccConfig:
    window_ms: int = 30
    stride_ms: int = 10
    n_mels: int = 40
    n_features: int = 40
    fft_size: int = 512
    fmin: float = 20.0
    fmax: float = 7600.0
    log_floor: float = 1e-12


@dataclass
class Spectrogram:
    values: np.ndarray  # (T, F)
    window_ms: int = 30
    stride_ms: int = 10
    n_features: int = 40

    @property
    def n_frames(self):
        return self.values.shape[0]


def frame_count(n_samples, window_ms, stride_ms, sample_rate) -> int:
    if stride_ms <= 0:
        raise ConfigurationError(f"stride must be positive: {stride_ms}")
    window = window_ms * sample_rate // 1000
    hop = stride_ms * sample_rate // 1000
    if n_samples < window:
        raise ConfigurationError(f"waveform shorter than one window: {n_samples} < {window}")
    return (n_samples - window) // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig = MfccConfig(), sample_rate=SAMPLE_RATE):
    """Triangular mel filterbank matrix (n_mels, fft_size//2 + 1) and the
    filter center frequencies in Hz."""
    n_bins = cfg.fft_size // 2 + 1
    mel_edges = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_edges = mel_to_hz(mel_edges)
    bin_freqs = np.arange(n_bins) * sample_rate / cfg.fft_size
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        lo, center, hi = hz_edges[m], hz_edges[m + 1], hz_edges[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb, hz_edges[1:-1]


def dct_matrix(n_features, n_mels):
    """Orthonormal DCT-II basis, rows = coefficients."""
    return dct(np.eye(n_mels), type=2, norm="ortho", axis=0)[:n_features]


def fix_length(samples, n=CLIP_SAMPLES):
    """Zero-pad (at the end) or truncate to exactly `n` samples."""
    samples = np.asarray(samples, dtype=np.float32)
    if len(samples) >= n:
        return samples[:n]
    return np.concatenate([samples, np.zeros(n - len(samples), dtype=np.float32)])


def compute_mfcc(w: Waveform, cfg: MfccConfig = MfccConfig()) -> Spectrogram:
    if w.sample_rate != SAMPLE_RATE:
        raise InputError(f"only {SAMPLE_RATE} Hz input is supported, got {w.sample_rate}")
    if len(w.samples) == 0:
        raise InputError("empty waveform")
    samples = fix_length(w.samples).astype(np.float64)
    window = cfg.window_ms * SAMPLE_RATE // 1000
    hop = cfg.stride_ms * SAMPLE_RATE // 1000
    T = frame_count(len(samples), cfg.window_ms, cfg.stride_ms, SAMPLE_RATE)
    hann = np.hanning(window)
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    frames = samples[idx] * hann
    spectrum = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1))
    fb, _ = mel_filterbank(cfg)
    mel_energy = spectrum @ fb.T
    log_mel = np.log(np.maximum(mel_energy, cfg.log_floor))
    feats = log_mel @ dct_matrix(cfg.n_features, cfg.n_mels).T
    return Spectrogram(
        values=feats.astype(np.float32),
        window_ms=cfg.window_ms,
        stride_ms=cfg.stride_ms,
        n_features=cfg.n_features,
    )


def mel_energies(w: Waveform, cfg: MfccConfig = MfccConfig()):
    """Per-frame mel filter energies (pre-log), for analysis and tests."""
    samples = fix_length(w.samples).astype(np.float64)
    window = cfg.window_ms * SAMPLE_RATE // 1000
    hop = cfg.stride_ms * SAMPLE_RATE // 1000
    T = frame_count(len(samples), cfg.window_ms, cfg.stride_ms, SAMPLE_RATE)
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    frames = samples[idx] * np.hanning(window)
    spectrum = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1))
    fb, centers = mel_filterbank(cfg)
    return spectrum @ fb.T, centers


# -- WAV / CSV I/O ----------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise InputError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def dump_spectrogram_csv(path, s: Spectrogram):
    """One row per time frame."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in s.values:
            writer.writerow([f"{v:.6f}" for v in row])
