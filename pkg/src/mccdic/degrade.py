"""Forward degradation simulators for the two restoration tasks.

Low-resolution targets come from keeping only the central block of the
orthonormal 2-D spectrum (frequency-domain decimation); undersampled targets
come from masking spectrum columns with a cartesian pattern and inverting the
zero-filled result. Both are deterministic given their parameters and a seed,
and both use unitary FFT scaling so energy bookkeeping is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mccdic import core

__all__ = [
    "SamplingMask",
    "fft2",
    "ifft2",
    "make_cartesian_mask",
    "undersample",
    "kspace_center_crop_lr",
    "upsample_zero_pad",
]


def fft2(image) -> np.ndarray:
    """Orthonormal 2-D FFT of a real image; returns the complex spectrum."""
    img = core.as_tensor(image, "image")
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    return np.fft.fft2(img, norm="ortho")


def ifft2(kspace) -> np.ndarray:
    """Real part of the orthonormal inverse 2-D FFT.

    For a conjugate-symmetric spectrum the discarded imaginary part is at
    floating-point noise level.
    """
    k = np.asarray(kspace, dtype=np.complex128)
    if k.ndim != 2:
        raise ValueError(f"expected a 2-D spectrum, got shape {k.shape}")
    return np.ascontiguousarray(np.fft.ifft2(k, norm="ortho").real)


@dataclass(frozen=True)
class SamplingMask:
    """Binary column mask over a centered (fftshifted) spectrum layout."""

    values: np.ndarray
    accel: float
    center_frac: float

    def __post_init__(self):
        vals = core.as_tensor(self.values, "mask")
        if vals.ndim != 2 or not np.isin(vals, (0.0, 1.0)).all():
            raise ValueError("mask must be a 2-D array of 0/1 values")
        object.__setattr__(self, "values", vals)


def _mask_values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, SamplingMask) else core.as_tensor(mask, "mask")


def make_cartesian_mask(m: int, n: int, accel: float, center_frac: float = 0.08,
                        seed: int = 0) -> SamplingMask:
    """Column-wise cartesian sampling mask in centered spectrum layout.

    The ceil(center_frac * n) lowest-frequency columns are always kept; the
    remaining budget of round(n / accel) total columns is filled uniformly at
    random, deterministically for a fixed seed.
    """
    if accel < 1:
        raise ValueError("acceleration must be >= 1")
    if not 0 < center_frac < 1:
        raise ValueError("center fraction must lie in (0, 1)")
    if center_frac * n >= n / accel:
        raise ValueError("center band alone exceeds the sampling budget")
    n_total = int(round(n / accel))
    n_center = math.ceil(center_frac * n)
    n_total = max(n_total, n_center)
    start = n // 2 - n_center // 2
    center_cols = np.arange(start, start + n_center)
    others = np.setdiff1d(np.arange(n), center_cols)
    rng = np.random.default_rng(seed)
    extra = rng.choice(others, size=n_total - n_center, replace=False)
    mask = np.zeros((m, n))
    mask[:, center_cols] = 1.0
    mask[:, extra] = 1.0
    return SamplingMask(values=mask, accel=float(accel), center_frac=float(center_frac))


def undersample(image, mask) -> np.ndarray:
    """Zero-filled reconstruction: invert the column-masked spectrum."""
    img = core.as_tensor(image, "image")
    vals = _mask_values(mask)
    if vals.shape != img.shape:
        raise ValueError(f"mask shape {vals.shape} does not match image {img.shape}")
    k = fft2(img) * np.fft.ifftshift(vals)
    return ifft2(k)


def _center_block(shape_big, shape_small):
    rows = slice(shape_big[0] // 2 - shape_small[0] // 2,
                 shape_big[0] // 2 - shape_small[0] // 2 + shape_small[0])
    cols = slice(shape_big[1] // 2 - shape_small[1] // 2,
                 shape_big[1] // 2 - shape_small[1] // 2 + shape_small[1])
    return rows, cols


def kspace_center_crop_lr(image, scale: int) -> np.ndarray:
    """Low-resolution image from the central spectrum block.

    Keeps the central (m/scale, n/scale) block of the shifted spectrum and
    inverts it at the reduced size; the 1/scale factor preserves the mean
    intensity.
    """
    img = core.as_tensor(image, "image")
    scale = int(scale)
    if scale < 1:
        raise ValueError("scale must be >= 1")
    m, n = img.shape
    if m % scale or n % scale:
        raise ValueError(f"image dims {img.shape} not divisible by scale {scale}")
    small = (m // scale, n // scale)
    k = np.fft.fftshift(fft2(img))
    rows, cols = _center_block((m, n), small)
    block = np.fft.ifftshift(k[rows, cols])
    return ifft2(block) / scale


def upsample_zero_pad(lr, scale: int) -> np.ndarray:
    """Embed a low-resolution spectrum in a zero full-size spectrum and invert.

    Inverse of :func:`kspace_center_crop_lr` on band-limited images; the
    scale factor restores the mean intensity.
    """
    small = core.as_tensor(lr, "lr")
    scale = int(scale)
    if scale < 1:
        raise ValueError("scale must be >= 1")
    m, n = small.shape[0] * scale, small.shape[1] * scale
    k_small = np.fft.fftshift(fft2(small))
    k_full = np.zeros((m, n), dtype=np.complex128)
    rows, cols = _center_block((m, n), small.shape)
    k_full[rows, cols] = k_small
    return ifft2(np.fft.ifftshift(k_full)) * scale
