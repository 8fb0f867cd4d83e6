"""Linear amplitude quantization and normalization statistics.

Amplitudes live in [-1, 1].  ``quantize`` maps them onto ``q`` equal-width
bins; ``dequantize`` returns bin centers, so a round trip through both
moves a value by at most half a bin width.  Bin q/2 is the silence bin:
amplitude 0.0 lands there and is the token fed back during forced-silence
generation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class QuantizerConfig:
    q: int = 256

    def __post_init__(self):
        if self.q < 2 or self.q % 2 != 0:
            raise ConfigError(f"quantizer bin count must be even and >= 2, got {self.q}")

    @property
    def silence_bin(self) -> int:
        return self.q // 2


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


def quantize(x: np.ndarray, cfg: QuantizerConfig) -> np.ndarray:
    """Map amplitudes in [-1, 1] to integer bins in [0, q-1].

    Out-of-range inputs saturate at the edge bins; NaN is rejected.
    """
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericError("NaN amplitude passed to quantize")
    bins = np.floor((x + 1.0) * 0.5 * cfg.q).astype(np.int64)
    return np.clip(bins, 0, cfg.q - 1)


def dequantize(bins: np.ndarray, cfg: QuantizerConfig) -> np.ndarray:
    """Map integer bins back to the center amplitude of each bin."""
    bins = np.asarray(bins)
    if bins.size and (bins.min() < 0 or bins.max() >= cfg.q):
        raise IndexError(f"bin out of range [0, {cfg.q}): min={bins.min()}, max={bins.max()}")
    return ((bins.astype(np.float64) + 0.5) / cfg.q * 2.0 - 1.0).astype(np.float32)


def pcm16_to_amplitude(samples: np.ndarray) -> np.ndarray:
    """Scale signed 16-bit integers to floats in [-1, 1) by 1/32768."""
    return (np.asarray(samples).astype(np.float32)) / 32768.0


def amplitude_to_pcm16(x: np.ndarray) -> np.ndarray:
    """Inverse of ``pcm16_to_amplitude`` with round-half-away-from-zero.

    Amplitudes are clamped to [-1, 1] first and results to the int16 range,
    so every int16 value round-trips exactly.
    """
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0) * 32768.0
    rounded = np.copysign(np.floor(np.abs(x) + 0.5), x)
    return np.clip(rounded, -32768, 32767).astype(np.int16)


def compute_norm_stats(sequences) -> NormStats:
    """Mean and population standard deviation over concatenated samples."""
    data = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1) for s in sequences])
    if data.size == 0:
        raise NumericError("cannot compute normalization stats of empty data")
    mean = float(data.mean())
    std = float(data.std())
    if std < 1e-12:
        raise NumericError("degenerate (constant) data: std is zero")
    return NormStats(mean=mean, std=std)


def standardize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((np.asarray(x, dtype=np.float64) - stats.mean) / stats.std).astype(np.float32)


def destandardize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) * stats.std + stats.mean).astype(np.float32)
