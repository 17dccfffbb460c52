"""Photographic statistics and image-quality metrics."""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np
from scipy import ndimage

from .image import luminance, rgb_to_yuv

__all__ = [
    "N_BINS",
    "PSNR_CAP",
    "ScalarStats",
    "histogram",
    "scalar_stats",
    "psnr",
    "mse",
    "ssim",
    "gaussian_window",
]

N_BINS = 32
PSNR_CAP = 100.0

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _bin_index(values: np.ndarray, lo: float) -> np.ndarray:
    idx = np.floor((values - lo) * N_BINS).astype(np.intp)
    return np.clip(idx, 0, N_BINS - 1)


def histogram(img, channel_set: str = "RGB") -> np.ndarray:
    """Normalised 32-bin histograms, one row per channel.

    ``RGB`` and ``Y`` bin over ``[0, 1]``; ``UV`` bins over ``[-0.5, 0.5]``.
    Accepts a leading batch axis, in which case the result is
    ``(N, channels, 32)``.
    """
    img = np.asarray(img, dtype=np.float64)
    kind = channel_set.upper()
    if kind == "RGB":
        planes, lo = img, 0.0
    elif kind == "Y":
        planes, lo = luminance(img)[..., None], 0.0
    elif kind == "UV":
        planes, lo = rgb_to_yuv(img)[..., 1:], -0.5
    else:
        raise ValueError(f"unknown channel set {channel_set!r}")
    lead = planes.shape[:-3]
    n_pix = planes.shape[-3] * planes.shape[-2]
    if n_pix == 0:
        raise ValueError("histogram of an empty image")
    ch = planes.shape[-1]
    flat = planes.reshape(-1, n_pix, ch)
    groups = flat.shape[0]
    idx = _bin_index(flat, lo)
    # offset each (image, channel) into its own block of bins
    offsets = (np.arange(groups)[:, None, None] * ch + np.arange(ch)[None, None, :]) * N_BINS
    counts = np.bincount((idx + offsets).ravel(), minlength=groups * ch * N_BINS)
    hist = counts.reshape(lead + (ch, N_BINS)).astype(np.float64) / n_pix
    return hist


@dataclass(frozen=True)
class ScalarStats:
    mean_luminance: float
    median_luminance: float
    rms_contrast: float
    mean_saturation: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self))


def scalar_stats(img) -> ScalarStats:
    return ScalarStats(*scalar_stats_array(img).tolist())


def scalar_stats_array(img) -> np.ndarray:
    """Vectorised form of :func:`scalar_stats`; ``(..., 4)`` output."""
    img = np.asarray(img, dtype=np.float64)
    y = luminance(img)
    lead = y.shape[:-2]
    y = y.reshape(lead + (-1,))
    chroma = (img.max(axis=-1) - img.min(axis=-1)).reshape(lead + (-1,))
    out = np.stack(
        [y.mean(axis=-1), np.median(y, axis=-1), y.std(axis=-1), chroma.mean(axis=-1)],
        axis=-1,
    )
    return np.clip(out, 0.0, 1.0)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit-peak images, capped at 100 dB."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / err), PSNR_CAP)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Mean SSIM of the luma planes over all fully-covered 11x11 windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    x, y = luminance(a), luminance(b)
    win = gaussian_window()
    r = SSIM_WINDOW // 2

    def filt(z):
        return ndimage.correlate(z, win, mode="constant")[r:-r, r:-r]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
