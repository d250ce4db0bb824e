"""Convolutional synthesis/analysis operator pairs.

A :class:`DictionaryBank` holds K small filters and realizes the linear
synthesis map ``features (m, n, K) -> image (m, n[, p])`` as a sum of
zero-padded "same" convolutions, one filter per feature channel. ``analyze``
applies the exact adjoint. A :class:`MultiScaleDictionary` chains per-level
banks with stride-2 up/down samplers into a single linear operator shaped
like a U-Net decoder with every nonlinearity, bias and normalization removed;
its adjoint walks the encoder direction. :class:`UntiedPair` couples a
synthesis operator with an analysis operator that is either its exact adjoint
(tied) or an independently evolving relaxation (untied).

All operators here are pure linear maps on float64 arrays; boundary handling
is zero padding so adjoints are exact and testable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mccdic import core

__all__ = [
    "DictionaryBank",
    "MultiScaleDictionary",
    "UntiedPair",
    "StackedPair",
    "delta_bank",
    "random_bank",
    "random_msdict",
    "synthesize",
    "analyze",
    "ms_synthesize",
    "ms_analyze",
    "apply_synthesis",
    "apply_analysis",
    "apply_adjoint",
    "feature_shapes",
    "zero_features",
    "random_features",
    "operator_norm",
    "save_dictionary_dir",
    "load_dictionary_dir",
]


# ---------------------------------------------------------------------------
# Core convolution primitive.
#
# Forward taps: out[i, j, c] = sum_{k,a,b} W[k, c, a, b] * F[i+a-lo, j+b-lo, k]
# with lo = (size-1)//2 and zero fill outside. The adjoint correlates with the
# doubly flipped filters and the complementary padding split, which makes the
# pair exact for even filter sizes as well.
# ---------------------------------------------------------------------------

def _pad_split(size: int) -> tuple[int, int]:
    lo = (size - 1) // 2
    return lo, size - 1 - lo


def _padded(stack: np.ndarray, size: int, pad_lo: int) -> np.ndarray:
    pad_hi = size - 1 - pad_lo
    return np.pad(stack, ((pad_lo, pad_hi), (pad_lo, pad_hi), (0, 0)))


def _tap_correlate(stack: np.ndarray, taps: np.ndarray, pad_lo: int) -> np.ndarray:
    """out[i, j, :] = sum_{a,b} stack[i+a-pad_lo, j+b-pad_lo, :] @ taps[:, :, a, b]
    with zero fill outside; taps are (q_in, q_out, size, size).

    Small contractions go through one window-matrix GEMM; larger ones
    accumulate shifted-slice matmuls, avoiding the window copy. Both paths
    reduce in a fixed order, so results are deterministic.
    """
    size = taps.shape[-1]
    m, n, q = stack.shape
    pad = _padded(stack, size, pad_lo)
    if q * size * size <= 32:
        win = sliding_window_view(pad, (size, size), axis=(0, 1))
        mat = win.reshape(m * n, q * size * size)
        tap_mat = taps.transpose(0, 2, 3, 1).reshape(q * size * size, taps.shape[1])
        return np.ascontiguousarray((mat @ tap_mat).reshape(m, n, taps.shape[1]))
    out = np.zeros((m, n, taps.shape[1]))
    for a in range(size):
        for b in range(size):
            out += pad[a:a + m, b:b + n, :] @ taps[:, :, a, b]
    return out


def _tap_outer(stack: np.ndarray, image3: np.ndarray, size: int) -> np.ndarray:
    """grad[k, c, a, b] = sum_{i,j} stack[i+a-lo, j+b-lo, k] * image3[i, j, c],
    the filter-coefficient gradient building block for synthesis losses."""
    lo, _ = _pad_split(size)
    m, n, _ = stack.shape
    pad = _padded(stack, size, lo)
    out = np.empty((stack.shape[2], image3.shape[2], size, size))
    for a in range(size):
        for b in range(size):
            out[:, :, a, b] = np.tensordot(pad[a:a + m, b:b + n, :], image3,
                                           axes=([0, 1], [0, 1]))
    return out


def _synth3(filters: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Synthesis with explicit channel axis: (m, n, K) -> (m, n, p)."""
    lo, _ = _pad_split(filters.shape[-1])
    return _tap_correlate(features, filters, lo)


def _analyze3(filters: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`_synth3`: (m, n, p) -> (m, n, K)."""
    _, hi = _pad_split(filters.shape[-1])
    flipped = filters[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _tap_correlate(image, flipped, hi)


# ---------------------------------------------------------------------------
# Single-scale banks.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DictionaryBank:
    """K convolution filters of spatial size ``filter_size`` with p image channels.

    ``filters`` has shape (K, p, filter_size, filter_size). Synthesis maps a
    K-channel feature stack to a p-channel image; p is 1 for the image-side
    banks and 2 for the bank acting on a stacked two-image residual.
    """

    filters: np.ndarray

    def __post_init__(self):
        arr = core.as_tensor(self.filters, "filters")
        if arr.ndim != 4 or arr.shape[-1] != arr.shape[-2]:
            raise ValueError(f"filters must be (K, p, size, size), got {arr.shape}")
        object.__setattr__(self, "filters", arr)

    @property
    def num_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def image_channels(self) -> int:
        return self.filters.shape[1]

    @property
    def filter_size(self) -> int:
        return self.filters.shape[-1]


def delta_bank(num_filters: int = 1, image_channels: int = 1, size: int = 3) -> DictionaryBank:
    """Bank of centered unit-impulse filters; synthesis sums the feature maps."""
    lo, _ = _pad_split(size)
    filters = np.zeros((num_filters, image_channels, size, size))
    filters[:, :, lo, lo] = 1.0
    return DictionaryBank(filters)


def random_bank(num_filters: int, image_channels: int, size: int,
                rng: np.random.Generator, normalize: bool = True) -> DictionaryBank:
    """Gaussian random bank, optionally with unit Frobenius norm per filter."""
    filters = rng.standard_normal((num_filters, image_channels, size, size))
    if normalize:
        norms = np.sqrt((filters ** 2).sum(axis=(1, 2, 3), keepdims=True))
        filters = filters / np.maximum(norms, 1e-30)
    return DictionaryBank(filters)


def synthesize(bank: DictionaryBank, features) -> np.ndarray:
    """Sum of per-channel convolutions: features (m, n, K) -> image.

    Output is (m, n) for single-channel banks, (m, n, p) otherwise; spatial
    size is preserved (same padding, zero border).
    """
    feats = core.as_tensor(features, "features")
    if feats.ndim != 3 or feats.shape[2] != bank.num_filters:
        raise ValueError(
            f"features must be (m, n, {bank.num_filters}), got {feats.shape}")
    out = _synth3(bank.filters, feats)
    return out[:, :, 0] if bank.image_channels == 1 else out


def analyze(bank: DictionaryBank, image) -> np.ndarray:
    """Exact adjoint of :func:`synthesize`: image -> features (m, n, K)."""
    img = _as_image3(image, bank.image_channels)
    return _analyze3(bank.filters, img)


def _as_image3(image, channels: int) -> np.ndarray:
    img = core.as_tensor(image, "image")
    if channels == 1:
        if img.ndim != 2:
            raise ValueError(f"expected a 2-D single-channel image, got shape {img.shape}")
        return img[:, :, None]
    if img.ndim != 3 or img.shape[2] != channels:
        raise ValueError(f"expected an (m, n, {channels}) image, got shape {img.shape}")
    return img


def _squeeze_image(img3: np.ndarray) -> np.ndarray:
    return img3[:, :, 0] if img3.shape[2] == 1 else img3


# ---------------------------------------------------------------------------
# Multi-scale dictionaries.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiScaleDictionary:
    """Pyramid of banks joined by stride-2 samplers into one linear operator.

    ``banks[l]`` maps the level-l feature stack to a carrier image with
    ``banks[l].image_channels`` channels at 1/2**l resolution. Synthesis
    starts at the coarsest level and repeatedly upsamples the carrier with a
    2x2 stride-2 transposed convolution (``up_kernels[l]``, shape
    (carrier_{l+1}, carrier_l, 2, 2)) and adds the next level's synthesis.
    The level-0 carrier is the output image, so ``banks[0].image_channels``
    is the operator's image channel count.
    """

    banks: tuple
    up_kernels: tuple

    def __post_init__(self):
        banks = tuple(self.banks)
        ups = tuple(core.as_tensor(k, "up_kernel") for k in self.up_kernels)
        if len(ups) != len(banks) - 1:
            raise ValueError("need exactly levels-1 up kernels")
        for l, ker in enumerate(ups):
            want = (banks[l + 1].image_channels, banks[l].image_channels, 2, 2)
            if ker.shape != want:
                raise ValueError(f"up kernel {l} has shape {ker.shape}, expected {want}")
        object.__setattr__(self, "banks", banks)
        object.__setattr__(self, "up_kernels", ups)

    @property
    def levels(self) -> int:
        return len(self.banks)

    @property
    def widths(self) -> tuple:
        return tuple(b.num_filters for b in self.banks)

    @property
    def image_channels(self) -> int:
        return self.banks[0].image_channels

    @property
    def filter_size(self) -> int:
        return self.banks[0].filter_size


def random_msdict(widths, image_channels: int, size: int,
                  rng: np.random.Generator) -> MultiScaleDictionary:
    """Random multi-scale dictionary with per-level channel ``widths``.

    Carrier channel counts are the image channels at level 0 and the level
    width at deeper levels.
    """
    widths = tuple(int(w) for w in widths)
    carriers = (image_channels,) + widths[1:]
    banks = [random_bank(widths[l], carriers[l], size, rng) for l in range(len(widths))]
    ups = []
    for l in range(len(widths) - 1):
        ker = rng.standard_normal((carriers[l + 1], carriers[l], 2, 2))
        norms = np.sqrt((ker ** 2).sum(axis=(1, 2, 3), keepdims=True))
        ups.append(ker / np.maximum(norms, 1e-30))
    return MultiScaleDictionary(tuple(banks), tuple(ups))


def _up_apply(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Stride-2 2x2 transposed convolution: (m, n, t_in) -> (2m, 2n, t_out)."""
    m, n, _ = x.shape
    out = np.einsum("ijd,dcab->iajbc", x, kernel, optimize=True)
    return out.reshape(2 * m, 2 * n, kernel.shape[1])


def _down_apply(kernel: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`_up_apply`: (2m, 2n, t_out) -> (m, n, t_in)."""
    m2, n2, t = y.shape
    view = y.reshape(m2 // 2, 2, n2 // 2, 2, t)
    return np.einsum("iajbc,dcab->ijd", view, kernel, optimize=True)


def _check_pyramid(msdict: MultiScaleDictionary, feats) -> None:
    if not isinstance(feats, list) or len(feats) != msdict.levels:
        raise ValueError(f"expected a {msdict.levels}-level feature pyramid")
    m0, n0 = feats[0].shape[:2]
    for l, f in enumerate(feats):
        want = (m0 >> l, n0 >> l, msdict.widths[l])
        if f.shape != want:
            raise ValueError(f"pyramid level {l} has shape {f.shape}, expected {want}")


def ms_synthesize(msdict: MultiScaleDictionary, features) -> np.ndarray:
    """Decoder pass: coarsest level synthesized, upsampled and merged by
    addition with each finer level until full resolution."""
    feats = [core.as_tensor(f, f"features level {i}") for i, f in enumerate(features)]
    _check_pyramid(msdict, feats)
    x = _synth3(msdict.banks[-1].filters, feats[-1])
    for l in range(msdict.levels - 2, -1, -1):
        x = _up_apply(msdict.up_kernels[l], x) + _synth3(msdict.banks[l].filters, feats[l])
    return _squeeze_image(x)


def ms_analyze(msdict: MultiScaleDictionary, image) -> list:
    """Encoder pass, the exact adjoint of :func:`ms_synthesize`."""
    g = _as_image3(image, msdict.image_channels)
    mod = 1 << (msdict.levels - 1)
    if g.shape[0] % mod or g.shape[1] % mod:
        raise ValueError(f"image dims {g.shape[:2]} not divisible by {mod}")
    feats = []
    for l in range(msdict.levels - 1):
        feats.append(_analyze3(msdict.banks[l].filters, g))
        g = _down_apply(msdict.up_kernels[l], g)
    feats.append(_analyze3(msdict.banks[-1].filters, g))
    return feats


# ---------------------------------------------------------------------------
# Operator pairs and dispatch over the two operator kinds.
# ---------------------------------------------------------------------------

def apply_synthesis(op, features) -> np.ndarray:
    """Synthesis application for a bank or a multi-scale dictionary."""
    if isinstance(op, MultiScaleDictionary):
        return ms_synthesize(op, features)
    return synthesize(op, features)


def apply_adjoint(op, image):
    """Exact adjoint of :func:`apply_synthesis` for the same operator."""
    if isinstance(op, MultiScaleDictionary):
        return ms_analyze(op, image)
    return analyze(op, image)


@dataclass(frozen=True)
class UntiedPair:
    """A synthesis operator coupled with its analysis operator.

    Tied pairs share one object, so analysis is the exact adjoint of
    synthesis. Untied pairs start from an identical copy that is then free to
    evolve independently, trading the exact-gradient interpretation for
    flexibility.
    """

    synthesis: object
    analysis: object

    @classmethod
    def tied(cls, op) -> "UntiedPair":
        return cls(synthesis=op, analysis=op)

    @classmethod
    def untied(cls, op) -> "UntiedPair":
        return cls(synthesis=op, analysis=_copy_op(op))

    @property
    def is_tied(self) -> bool:
        return self.analysis is self.synthesis


def _copy_op(op):
    if isinstance(op, MultiScaleDictionary):
        return MultiScaleDictionary(
            tuple(DictionaryBank(b.filters.copy()) for b in op.banks),
            tuple(k.copy() for k in op.up_kernels),
        )
    return DictionaryBank(op.filters.copy())


@dataclass(frozen=True)
class StackedPair:
    """Operator taking one feature stack to a two-channel image.

    The synthesis output stacks the ``top`` and ``bottom`` pair syntheses
    along a channel axis, which realizes filters formed by concatenating the
    two banks' filters channelwise; the analysis side sums the component
    analyses of the two image channels. Building it from the two common-image
    pairs keeps it consistent with them by construction.
    """

    top: UntiedPair
    bottom: UntiedPair


def pair_synthesize(pair, features) -> np.ndarray:
    if isinstance(pair, StackedPair):
        y1 = apply_synthesis(pair.top.synthesis, features)
        y2 = apply_synthesis(pair.bottom.synthesis, features)
        return np.stack([y1, y2], axis=-1)
    return apply_synthesis(pair.synthesis, features)


def pair_analyze(pair, image):
    if isinstance(pair, StackedPair):
        img = core.as_tensor(image, "image")
        if img.ndim != 3 or img.shape[2] != 2:
            raise ValueError(f"expected an (m, n, 2) stacked image, got {img.shape}")
        a = apply_analysis_side(pair.top, img[:, :, 0])
        b = apply_analysis_side(pair.bottom, img[:, :, 1])
        return core.pyramid_map(np.add, a, b)
    return apply_analysis_side(pair, image)


def apply_analysis_side(pair: UntiedPair, image):
    return apply_adjoint(pair.analysis, image)


def apply_analysis(pair_or_op, image):
    """Analysis application: pairs use their (possibly untied) analysis side,
    bare operators their exact adjoint."""
    if isinstance(pair_or_op, (UntiedPair, StackedPair)):
        return pair_analyze(pair_or_op, image)
    return apply_adjoint(pair_or_op, image)


def _synthesis_parts(op):
    """Normalize any operator-like object to (synth_fn, adjoint_fn, shape_op)."""
    if isinstance(op, StackedPair):
        top = op.top.synthesis
        bot = op.bottom.synthesis

        def synth(f):
            return np.stack([apply_synthesis(top, f), apply_synthesis(bot, f)], axis=-1)

        def adj(y):
            a = apply_adjoint(top, y[:, :, 0])
            b = apply_adjoint(bot, y[:, :, 1])
            return core.pyramid_map(np.add, a, b)

        return synth, adj, top
    if isinstance(op, UntiedPair):
        op = op.synthesis
    return (lambda f: apply_synthesis(op, f)), (lambda y: apply_adjoint(op, y)), op


# ---------------------------------------------------------------------------
# Feature-space bookkeeping and operator norms.
# ---------------------------------------------------------------------------

def feature_shapes(op, spatial_shape):
    """Feature stack shape(s) this operator expects at the given image size."""
    _, _, base = _synthesis_parts(op)
    m, n = int(spatial_shape[0]), int(spatial_shape[1])
    if isinstance(base, MultiScaleDictionary):
        return [(m >> l, n >> l, base.widths[l]) for l in range(base.levels)]
    return (m, n, base.num_filters)


def zero_features(op, spatial_shape):
    shapes = feature_shapes(op, spatial_shape)
    if isinstance(shapes, list):
        return [np.zeros(s) for s in shapes]
    return np.zeros(shapes)


def random_features(op, spatial_shape, rng: np.random.Generator):
    shapes = feature_shapes(op, spatial_shape)
    if isinstance(shapes, list):
        return [rng.standard_normal(s) for s in shapes]
    return rng.standard_normal(shapes)


def operator_norm(op, spatial_shape=(32, 32), tol: float = 1e-6,
                  max_iter: int = 200) -> float:
    """Largest singular value of the synthesis operator at this image size.

    Power iteration on adjoint(synthesis(.)) with a fixed internal seed;
    stops when the estimate's relative change drops below ``tol`` or after
    ``max_iter`` rounds. A zero operator returns 0. For untied pairs the
    exact adjoint of the synthesis side is used, so the result is the true
    synthesis norm regardless of how far the analysis side has diverged.
    """
    synth, adj, base = _synthesis_parts(op)

    def fast_norm(x) -> float:
        if isinstance(x, list):
            return float(np.sqrt(sum(float((level ** 2).sum()) for level in x)))
        return float(np.sqrt((x ** 2).sum()))

    rng = np.random.default_rng(0x5CA1E)
    v = random_features(base, spatial_shape, rng)
    nv = fast_norm(v)
    if nv == 0.0:
        return 0.0
    v = core.pyramid_scale(1.0 / nv, v)
    sigma = 0.0
    for _ in range(max_iter):
        w = adj(synth(v))
        lam = fast_norm(w)
        if lam == 0.0:
            return 0.0
        new_sigma = float(np.sqrt(lam))
        v = core.pyramid_scale(1.0 / lam, w)
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-30):
            return new_sigma
        sigma = new_sigma
    return sigma


# ---------------------------------------------------------------------------
# Serialization: MCT1 tensors under a directory plus a key=value manifest.
# ---------------------------------------------------------------------------

_MANIFEST = "dict.cfg"


def _op_files(name: str, op, suffix: str = "") -> dict:
    if isinstance(op, MultiScaleDictionary):
        files = {}
        for l, b in enumerate(op.banks):
            files[f"bank_{name}_l{l}{suffix}.mct"] = b.filters
        for l, k in enumerate(op.up_kernels):
            files[f"bank_{name}_up{l}{suffix}.mct"] = k
        return files
    return {f"bank_{name}{suffix}.mct": op.filters}


def save_dictionary_dir(path, pairs: dict, extra: dict | None = None) -> None:
    """Write named operator pairs as MCT1 tensors plus a ``dict.cfg`` manifest.

    ``pairs`` maps a short name (e.g. ``Dc``) to an :class:`UntiedPair`.
    Analysis-side tensors are written only for untied pairs.
    """
    os.makedirs(path, exist_ok=True)
    lines = ["format=mccdic-dict-v1", "names=" + ",".join(pairs)]
    if extra:
        lines += [f"{k}={v}" for k, v in extra.items()]
    for name, pair in pairs.items():
        op = pair.synthesis
        if isinstance(op, MultiScaleDictionary):
            lines.append(f"{name}.kind=msdict")
            lines.append(f"{name}.levels={op.levels}")
            lines.append(f"{name}.widths=" + ",".join(str(w) for w in op.widths))
        else:
            lines.append(f"{name}.kind=bank")
            lines.append(f"{name}.K={op.num_filters}")
        lines.append(f"{name}.p={op.image_channels}")
        lines.append(f"{name}.n={op.filter_size}")
        lines.append(f"{name}.tied={1 if pair.is_tied else 0}")
        files = _op_files(name, op)
        if not pair.is_tied:
            files.update(_op_files(name, pair.analysis, suffix="_adj"))
        for fname, arr in files.items():
            core.save_mct(os.path.join(path, fname), arr)
    with open(os.path.join(path, _MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_op(path, name: str, meta: dict, suffix: str = ""):
    if meta[f"{name}.kind"] == "msdict":
        levels = int(meta[f"{name}.levels"])
        banks = tuple(
            DictionaryBank(core.load_mct(os.path.join(path, f"bank_{name}_l{l}{suffix}.mct")))
            for l in range(levels))
        ups = tuple(
            core.load_mct(os.path.join(path, f"bank_{name}_up{l}{suffix}.mct"))
            for l in range(levels - 1))
        return MultiScaleDictionary(banks, ups)
    return DictionaryBank(core.load_mct(os.path.join(path, f"bank_{name}{suffix}.mct")))


def load_dictionary_dir(path) -> tuple[dict, dict]:
    """Read back operator pairs and the manifest written by
    :func:`save_dictionary_dir`. Returns (pairs, manifest dict)."""
    meta = {}
    with open(os.path.join(path, _MANIFEST)) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, val = line.split("=", 1)
                meta[key.strip()] = val.strip()
    if meta.get("format") != "mccdic-dict-v1":
        raise ValueError(f"{path}: unknown dictionary directory format")
    pairs = {}
    for name in meta["names"].split(","):
        syn = _load_op(path, name, meta)
        if meta[f"{name}.tied"] == "1":
            pairs[name] = UntiedPair.tied(syn)
        else:
            pairs[name] = UntiedPair(syn, _load_op(path, name, meta, suffix="_adj"))
    return pairs, meta
