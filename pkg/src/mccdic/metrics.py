"""Image quality metrics: PSNR, RMSE and mean local SSIM."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mccdic import core

__all__ = ["psnr", "rmse", "ssim"]


def _checked_pair(x, ref):
    x = core.as_tensor(x, "x")
    ref = core.as_tensor(ref, "ref")
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf.

    ``peak`` defaults to the reference image's maximum value.
    """
    x, ref = _checked_pair(x, ref)
    if peak is None:
        peak = float(ref.max())
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def rmse(x, ref) -> float:
    """Root mean squared error."""
    x, ref = _checked_pair(x, ref)
    return float(np.sqrt(np.mean((x - ref) ** 2)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, window.shape)
    return np.einsum("ijab,ab->ij", win, window, optimize=True)


def ssim(x, ref, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local structural similarity on a unit dynamic range.

    Uses an 11x11 Gaussian window (sigma 1.5) and stabilizers
    C1=(k1*L)^2, C2=(k2*L)^2; the local map is averaged over all fully
    interior window positions.
    """
    x, ref = _checked_pair(x, ref)
    if x.ndim != 2:
        raise ValueError(f"expected 2-D images, got shape {x.shape}")
    if min(x.shape) < window_size:
        raise ValueError(f"images of shape {x.shape} are smaller than the "
                         f"{window_size}x{window_size} window")
    w = _gaussian_window(window_size, sigma)
    mu_x = _window_means(x, w)
    mu_y = _window_means(ref, w)
    mu_xx = _window_means(x * x, w)
    mu_yy = _window_means(ref * ref, w)
    mu_xy = _window_means(x * ref, w)
    var_x = mu_xx - mu_x ** 2
    var_y = mu_yy - mu_y ** 2
    cov = mu_xy - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
