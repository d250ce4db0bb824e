"""Shared dense-array primitives: validation, inner products, pyramid helpers
and the MCT1 binary tensor format.

Conventions used throughout the package: every tensor is a C-contiguous
float64 numpy array. Images are indexed (row, col), feature stacks
(row, col, channel). Multi-scale feature pyramids are plain lists of such
arrays ordered finest level first; the ``pyramid_*`` helpers apply the basic
vector-space operations uniformly to a bare array or to a pyramid so that
solver code never branches on the representation.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "as_tensor",
    "dot",
    "axpy",
    "pyramid_map",
    "pyramid_dot",
    "pyramid_axpy",
    "pyramid_scale",
    "pyramid_norm",
    "pyramid_l1",
    "save_mct",
    "load_mct",
]

MCT_MAGIC = b"MCT1"


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def dot(a, b) -> float:
    """Inner product sum_i a_i * b_i of two identically shaped tensors."""
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    _require_same_shape(a, b)
    return float(np.dot(a.ravel(), b.ravel()))


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` elementwise. Shapes must match."""
    x = as_tensor(x, "x")
    y = as_tensor(y, "y")
    _require_same_shape(x, y)
    return float(alpha) * x + y


# ---------------------------------------------------------------------------
# Pyramid helpers: a "feature object" is either one ndarray (single scale) or
# a list of ndarrays (one per level, finest first).
# ---------------------------------------------------------------------------

def pyramid_map(fn, *feats):
    """Apply ``fn`` levelwise across one or more feature objects."""
    if isinstance(feats[0], list):
        return [fn(*level) for level in zip(*feats)]
    return fn(*feats)


def pyramid_dot(a, b) -> float:
    """Inner product across all levels of two feature objects."""
    if isinstance(a, list):
        return float(sum(dot(x, y) for x, y in zip(a, b, strict=True)))
    return dot(a, b)


def pyramid_axpy(alpha: float, x, y):
    """Levelwise ``alpha * x + y``."""
    return pyramid_map(lambda u, v: axpy(alpha, u, v), x, y)


def pyramid_scale(alpha: float, x):
    """Levelwise ``alpha * x``."""
    return pyramid_map(lambda u: float(alpha) * u, x)


def pyramid_norm(x) -> float:
    """Euclidean norm across all levels."""
    return float(np.sqrt(pyramid_dot(x, x)))


def pyramid_l1(x) -> float:
    """Sum of absolute values across all levels."""
    if isinstance(x, list):
        return float(sum(np.abs(level).sum() for level in x))
    return float(np.abs(x).sum())


# ---------------------------------------------------------------------------
# MCT1 binary tensor format: 4-byte magic "MCT1", u32 little-endian rank,
# rank x u64 little-endian dims, then the raw little-endian f64 payload.
# ---------------------------------------------------------------------------

def save_mct(path, array) -> None:
    """Write a tensor to ``path`` in the MCT1 binary format."""
    arr = as_tensor(array, "array")
    with open(path, "wb") as fh:
        fh.write(MCT_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def load_mct(path) -> np.ndarray:
    """Read a tensor written by :func:`save_mct`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MCT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MCT_MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return as_tensor(data.reshape(dims), "file tensor")
