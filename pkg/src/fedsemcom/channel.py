"""Physical channel between the channel encoder and decoder.

Real symbol vectors are paired into complex baseband symbols, passed through
AWGN with optional flat Rayleigh fading, and recovered with per-symbol
zero-forcing under perfect channel knowledge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ChannelInputError, LayoutError

FADING_MODES = ("none", "rayleigh")
DEEP_FADE_FLOOR = 1e-3


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 10.0
    fading: str = "none"
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.snr_db) and self.snr_db != math.inf:
            raise ChannelInputError(f"snr_db must be finite, got {self.snr_db}")
        if self.fading not in FADING_MODES:
            raise ChannelInputError(f"fading must be one of {FADING_MODES}, got {self.fading!r}")


def noise_variance(snr_db: float) -> float:
    """Per-complex-symbol noise power for unit signal power."""
    if snr_db == math.inf:
        return 0.0
    if not math.isfinite(snr_db):
        raise ChannelInputError(f"snr_db must be finite, got {snr_db}")
    return 10.0 ** (-snr_db / 10.0)


def to_complex(symbols: np.ndarray) -> np.ndarray:
    """Pair consecutive reals along the last axis: (a, b, ...) -> (a+bi, ...)."""
    x = np.asarray(symbols, dtype=np.float64)
    if x.shape[-1] % 2:
        raise LayoutError(f"symbol vector length {x.shape[-1]} is odd")
    return x[..., 0::2] + 1j * x[..., 1::2]


def from_complex(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.complex128)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],), dtype=np.float64)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def _complex_gaussian(rng: np.random.Generator, shape: tuple[int, ...], power: float) -> np.ndarray:
    scale = math.sqrt(power / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass
class Realization:
    """One draw of fading gains and additive noise for a block of symbols."""

    h: np.ndarray
    n: np.ndarray


def draw(shape: tuple[int, ...], cfg: ChannelConfig, rng: np.random.Generator) -> Realization:
    # Fading first, then noise, so AWGN-only and Rayleigh runs draw different
    # streams but each is reproducible on its own.
    if cfg.fading == "rayleigh":
        h = _complex_gaussian(rng, shape, 1.0)
    else:
        h = np.ones(shape, dtype=np.complex128)
    n0 = noise_variance(cfg.snr_db)
    if n0 == 0.0:
        n = np.zeros(shape, dtype=np.complex128)
    else:
        n = _complex_gaussian(rng, shape, n0)
    return Realization(h=h, n=n)


def transmit(
    x: np.ndarray, cfg: ChannelConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Return the received symbols ``y = h*x + n`` and the fading gains ``h``."""
    x = np.asarray(x, dtype=np.complex128)
    real = draw(x.shape, cfg, rng)
    return real.h * x + real.n, real.h


def apply(x: np.ndarray, real: Realization) -> np.ndarray:
    return real.h * np.asarray(x, dtype=np.complex128) + real.n


def effective_gain(h: np.ndarray, h_min: float = DEEP_FADE_FLOOR) -> tuple[np.ndarray, int]:
    """Gains used for equalization, with deep fades clamped to ``h_min`` in magnitude."""
    h = np.asarray(h, dtype=np.complex128)
    mag = np.abs(h)
    deep = mag <= h_min
    count = int(np.count_nonzero(deep))
    if not count:
        return h, 0
    h_eff = h.copy()
    # A zero gain carries no phase; fall back to the positive real axis.
    phase = np.where(mag[deep] > 0, h[deep] / np.where(mag[deep] > 0, mag[deep], 1.0), 1.0)
    h_eff[deep] = h_min * phase
    return h_eff, count


def zf_equalize(
    y: np.ndarray, h: np.ndarray, h_min: float = DEEP_FADE_FLOOR
) -> tuple[np.ndarray, int]:
    """Zero-forcing estimate ``y / h`` and the number of deep-faded symbols."""
    h_eff, count = effective_gain(h, h_min)
    return np.asarray(y, dtype=np.complex128) / h_eff, count
