"""Reconstruction quality metrics: PSNR and multi-scale SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MetricError

PSNR_CAP_DB = 99.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(image: np.ndarray, image_hat: np.ndarray, max_val: float = 1.0) -> float:
    """PSNR in dB; identical inputs return ``math.inf``.

    Use :func:`psnr_for_csv` to get the capped value written to reports.
    """
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(image_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if not max_val > 0:
        raise MetricError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def psnr_for_csv(value: float) -> float:
    return min(value, PSNR_CAP_DB)


@dataclass(frozen=True)
class MsSsimResult:
    value: float
    scales: int
    reduced: bool


def _gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filter over the last two axes."""
    k = len(win)
    rows = sliding_window_view(img, k, axis=-1) @ win
    return sliding_window_view(rows, k, axis=-2) @ win


def _ssim_cs(x: np.ndarray, y: np.ndarray, win: np.ndarray, data_range: float) -> tuple[np.ndarray, np.ndarray]:
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x = _filter(x, win)
    mu_y = _filter(y, win)
    sxx = _filter(x * x, win) - mu_x**2
    syy = _filter(y * y, win) - mu_y**2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    ssim_map = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1) * cs_map
    return ssim_map.mean(axis=(-2, -1)), cs_map.mean(axis=(-2, -1))


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    x = img[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def supported_scales(height: int, width: int, max_scales: int = len(MSSSIM_WEIGHTS)) -> int:
    """Largest scale count whose coarsest level still fits an 11x11 window."""
    side = min(height, width)
    m = 0
    while m < max_scales and side >= (2**m) * WINDOW_SIZE:
        m += 1
    return m


def ms_ssim_detail(image: np.ndarray, image_hat: np.ndarray, data_range: float = 1.0) -> MsSsimResult:
    """MS-SSIM of one ``(C, H, W)`` or ``(H, W)`` pair, averaged over channels.

    Small images use fewer scales; the leading weights are renormalized to sum
    to one and the result is marked ``reduced``.
    """
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(image_hat, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise MetricError(f"expected (C, H, W) images, got {x.shape}")
    scales = supported_scales(x.shape[-2], x.shape[-1])
    if scales == 0:
        raise MetricError(f"image {x.shape[-2]}x{x.shape[-1]} is smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} window")
    reduced = scales < len(MSSSIM_WEIGHTS)
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    if reduced:
        weights = weights / weights.sum()
    win = _gaussian_window()
    levels = []
    for m in range(scales):
        ssim_c, cs_c = _ssim_cs(x, y, win, data_range)
        if m < scales - 1:
            levels.append(np.maximum(cs_c, 0.0))
            x, y = _downsample(x), _downsample(y)
    levels.append(np.maximum(ssim_c, 0.0))
    per_channel = np.prod(np.stack(levels) ** weights[:, None], axis=0)
    value = float(np.clip(per_channel.mean(), 0.0, 1.0))
    return MsSsimResult(value, scales, reduced)


def ms_ssim(image: np.ndarray, image_hat: np.ndarray, data_range: float = 1.0) -> float:
    return ms_ssim_detail(image, image_hat, data_range).value


def batch_quality(images: np.ndarray, recon: np.ndarray) -> tuple[float, float, int]:
    """Mean per-image PSNR (capped) and MS-SSIM over a batch, summed in index order."""
    p_total = 0.0
    s_total = 0.0
    scales = 0
    for a, b in zip(images, recon):
        p_total += psnr_for_csv(psnr(a, b))
        r = ms_ssim_detail(a, b)
        s_total += r.value
        scales = r.scales
    n = len(images)
    return p_total / n, s_total / n, scales
