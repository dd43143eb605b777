"""Waveform and spectrogram augmentation.

Waveform side: random time shift, linear resampling, additive background
noise. Spectrogram side: SpecAugment-style time/frequency masking with
zero fill. All draws come from an explicit numpy Generator so a fixed seed
reproduces bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frontend import CLIP_SAMPLES, Spectrogram, Waveform, fix_length


@dataclass
class AugmentPolicy:
    time_shift_ms: tuple = (-100, 100)
    resample_factor: tuple = (0.85, 1.15)
    background_volume: float = 0.1
    n_time_masks: int = 2
    time_mask_size: tuple = (0, 25)
    n_freq_masks: int = 2
    freq_mask_size: tuple = (0, 7)
    rng_seed: int = 0

    @classmethod
    def identity(cls):
        """A policy where every draw is a no-op; handy for eval and tests."""
        return cls(
            time_shift_ms=(0, 0),
            resample_factor=(1.0, 1.0),
            background_volume=0.0,
            n_time_masks=0,
            n_freq_masks=0,
        )


def _shift(samples, n):
    """Shift right by n samples (left for negative n), zero-padding."""
    if n == 0:
        return samples.copy()
    out = np.zeros_like(samples)
    if n > 0:
        out[n:] = samples[:-n]
    else:
        out[:n] = samples[-n:]
    return out


def _resample_linear(samples, factor):
    """Resample by `factor` via linear interpolation (factor > 1 slows down)."""
    if factor == 1.0:
        return samples.copy()
    n_out = max(1, int(round(len(samples) * factor)))
    src = np.linspace(0.0, len(samples) - 1, n_out)
    return np.interp(src, np.arange(len(samples)), samples).astype(samples.dtype)


def augment_waveform(w: Waveform, noise_pool, policy: AugmentPolicy, rng: np.random.Generator) -> Waveform:
    """Apply shift, resample and background noise; output stays 1 s, in [-1, 1].

    The noise step is skipped when `noise_pool` is empty.
    """
    samples = fix_length(w.samples)
    shift_ms = rng.uniform(policy.time_shift_ms[0], policy.time_shift_ms[1])
    samples = _shift(samples, int(round(shift_ms * w.sample_rate / 1000.0)))
    factor = rng.uniform(policy.resample_factor[0], policy.resample_factor[1])
    samples = fix_length(_resample_linear(samples, factor))
    if noise_pool and policy.background_volume > 0:
        noise = noise_pool[rng.integers(0, len(noise_pool))]
        nsamp = fix_length(noise.samples, CLIP_SAMPLES) if len(noise.samples) <= CLIP_SAMPLES else None
        if nsamp is None:
            start = rng.integers(0, len(noise.samples) - CLIP_SAMPLES + 1)
            nsamp = noise.samples[start : start + CLIP_SAMPLES]
        volume = rng.uniform(0.0, policy.background_volume)
        samples = samples + volume * nsamp
    return Waveform(samples=np.clip(samples, -1.0, 1.0), sample_rate=w.sample_rate)


def spec_augment(s: Spectrogram, policy: AugmentPolicy, rng: np.random.Generator) -> Spectrogram:
    """Zero out random time and frequency stripes; unmasked cells untouched."""
    values = s.values.copy()
    T, F = values.shape
    for _ in range(policy.n_time_masks):
        width = int(rng.integers(policy.time_mask_size[0], policy.time_mask_size[1] + 1))
        if width > 0:
            start = int(rng.integers(0, T - width + 1))
            values[start : start + width, :] = 0.0
    for _ in range(policy.n_freq_masks):
        width = int(rng.integers(policy.freq_mask_size[0], policy.freq_mask_size[1] + 1))
        if width > 0:
            start = int(rng.integers(0, F - width + 1))
            values[:, start : start + width] = 0.0
    return Spectrogram(values=values, window_ms=s.window_ms, stride_ms=s.stride_ms, n_features=s.n_features)
