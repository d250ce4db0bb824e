"""Synthetic multi-contrast phantom pairs.

A phantom pair consists of two images with identical ellipse geometry but
per-contrast intensities, mimicking two scans of the same anatomy. An
optional "inconsistent" ellipse appears only in the reference image, giving a
controlled structure that a common/unique decomposition should route into the
reference's unique component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Ellipse",
    "PhantomSpec",
    "ellipse_mask",
    "make_phantom_pair",
    "random_phantom_spec",
]

# Intensity levels for generated phantoms; any two differ by at least 0.1 so
# every region boundary is visible in both contrasts.
_LEVELS = np.round(np.arange(0.15, 1.0, 0.1), 2)


@dataclass(frozen=True)
class Ellipse:
    """One ellipse: center (row, col) and semi-axes in [-1, 1] coordinates,
    rotation in radians, and one intensity per contrast."""

    center: tuple
    axes: tuple
    angle: float
    value_ref: float
    value_tgt: float

    def __post_init__(self):
        if not (0.0 <= self.value_ref <= 1.0 and 0.0 <= self.value_tgt <= 1.0):
            raise ValueError("ellipse intensities must lie in [0, 1]")
        if min(self.axes) <= 0:
            raise ValueError("ellipse semi-axes must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry shared by both contrasts, plus an optional extra ellipse that
    is drawn only in the reference image."""

    shape: tuple
    ellipses: tuple
    inconsistent: Ellipse | None = None
    supersample: int = 1


def _grid(shape, supersample: int):
    m, n = shape
    s = supersample
    rows = (np.arange(m * s) + 0.5) / (m * s) * 2.0 - 1.0
    cols = (np.arange(n * s) + 0.5) / (n * s) * 2.0 - 1.0
    return np.meshgrid(rows, cols, indexing="ij")


def _inside(ellipse: Ellipse, rr, cc):
    ct, st = math.cos(ellipse.angle), math.sin(ellipse.angle)
    dr = rr - ellipse.center[0]
    dc = cc - ellipse.center[1]
    u = (dc * ct + dr * st) / ellipse.axes[0]
    v = (-dc * st + dr * ct) / ellipse.axes[1]
    return u * u + v * v <= 1.0


def ellipse_mask(shape, ellipse: Ellipse) -> np.ndarray:
    """Boolean interior mask of one ellipse at the given image shape."""
    rr, cc = _grid(shape, 1)
    return _inside(ellipse, rr, cc)


def _downsample(img: np.ndarray, shape, s: int) -> np.ndarray:
    if s == 1:
        return img
    m, n = shape
    return img.reshape(m, s, n, s).mean(axis=(1, 3))


def make_phantom_pair(spec: PhantomSpec):
    """Render the two contrast images of a phantom.

    Ellipses are painted in list order, later ones overwriting earlier ones,
    so values stay in [0, 1]. The inconsistent ellipse, when present, is
    painted last and only into the reference image. Deterministic: the same
    spec always yields bit-identical images.
    """
    rr, cc = _grid(spec.shape, spec.supersample)
    x1 = np.zeros(rr.shape)
    x2 = np.zeros(rr.shape)
    for e in spec.ellipses:
        mask = _inside(e, rr, cc)
        x1[mask] = e.value_ref
        x2[mask] = e.value_tgt
    if spec.inconsistent is not None:
        x1[_inside(spec.inconsistent, rr, cc)] = spec.inconsistent.value_ref
    x1 = _downsample(x1, spec.shape, spec.supersample)
    x2 = _downsample(x2, spec.shape, spec.supersample)
    return x1, x2


def _overlaps(candidate: Ellipse, others, shape) -> bool:
    cand = ellipse_mask(shape, candidate)
    for e in others:
        if np.logical_and(cand, ellipse_mask(shape, e)).any():
            return True
    return False


def random_phantom_spec(size: int, n_ellipses: int, inconsistent: bool = False,
                        seed: int = 0, supersample: int = 1) -> PhantomSpec:
    """Draw a random phantom spec with well-separated intensity levels.

    Each contrast gets its own shuffled subset of the level grid, so every
    pair of regions differs by at least 0.1 within each contrast. The
    inconsistent ellipse is placed so it overlaps no other ellipse.
    """
    need = n_ellipses + (1 if inconsistent else 0)
    if need > len(_LEVELS):
        raise ValueError(f"at most {len(_LEVELS)} ellipses supported, got {need}")
    rng = np.random.default_rng(seed)
    vals_ref = rng.permutation(_LEVELS)[:need]
    vals_tgt = rng.permutation(_LEVELS)[:n_ellipses]
    ellipses = []
    for i in range(n_ellipses):
        center = tuple(rng.uniform(-0.55, 0.55, size=2))
        axes = tuple(rng.uniform(0.12, 0.4, size=2))
        angle = float(rng.uniform(0.0, math.pi))
        ellipses.append(Ellipse(center, axes, angle,
                                float(vals_ref[i]), float(vals_tgt[i])))
    extra = None
    if inconsistent:
        probe_shape = (max(size // 2, 32), max(size // 2, 32))
        for _ in range(500):
            center = tuple(rng.uniform(-0.75, 0.75, size=2))
            axes = tuple(rng.uniform(0.07, 0.13, size=2))
            angle = float(rng.uniform(0.0, math.pi))
            cand = Ellipse(center, axes, angle, float(vals_ref[-1]), 0.0)
            in_bounds = (abs(center[0]) + max(axes) < 0.95
                         and abs(center[1]) + max(axes) < 0.95)
            if in_bounds and not _overlaps(cand, ellipses, probe_shape):
                extra = cand
                break
        if extra is None:
            raise ValueError("could not place a non-overlapping inconsistent ellipse")
    return PhantomSpec(shape=(size, size), ellipses=tuple(ellipses),
                       inconsistent=extra, supersample=supersample)
