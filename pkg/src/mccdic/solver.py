"""Alternating proximal-gradient solver for the multi-contrast model.

The model writes the reference image as common + unique syntheses
``x1 = Dc(C) + Du(U)`` and the target as ``x2 = Hc(C) + Hv(V)``; the solver
minimizes the two quadratic fidelity terms plus L1 penalties on the three
feature stacks by cycling proximal-gradient updates over U, V and C. The C
step works on the two-channel stacked residual, whose operator stacks the Dc
and Hc pairs channelwise. The restored target is synthesized from the final
common and target-unique features through the reconstruction banks Qc/Qv.

With tied dictionaries, the soft-threshold prox and step sizes at most the
reciprocal squared operator norms, every block update is a majorize-minimize
step, so the objective trace is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from mccdic import core
from mccdic import dictionary as dct

__all__ = [
    "SolverConfig",
    "FeatureState",
    "ModelDictionaries",
    "TraceRow",
    "random_model_dictionaries",
    "save_model_dictionaries",
    "load_model_dictionaries",
    "soft_threshold",
    "init_features",
    "grad_u",
    "grad_v",
    "grad_c",
    "update_u",
    "update_v",
    "update_c",
    "build_stacked_residual",
    "objective_terms",
    "objective_value",
    "resolve_steps",
    "step_block",
    "iterate",
    "reconstruct",
    "component_images",
]

_MODEL_BANK_NAMES = ("Dc", "Du", "Hc", "Hv", "Qc", "Qv")


@dataclass(frozen=True)
class ModelDictionaries:
    """The seven operators of the model, stored as six pairs.

    ``dc``/``du`` decompose the reference image, ``hc``/``hv`` the target;
    ``qc``/``qv`` synthesize the restored target. The stacked common operator
    used by the C update is derived from ``dc`` and ``hc``, which keeps its
    filters the channelwise concatenation of theirs by construction.
    """

    dc: dct.UntiedPair
    du: dct.UntiedPair
    hc: dct.UntiedPair
    hv: dct.UntiedPair
    qc: dct.UntiedPair
    qv: dct.UntiedPair

    @property
    def lc(self) -> dct.StackedPair:
        return dct.StackedPair(top=self.dc, bottom=self.hc)

    @property
    def is_tied(self) -> bool:
        return all(getattr(self, k).is_tied for k in ("dc", "du", "hc", "hv", "qc", "qv"))


@dataclass(frozen=True)
class FeatureState:
    """Common (C) and unique (U reference-side, V target-side) feature stacks
    after ``t`` update blocks. Stacks are arrays in single-scale mode and
    per-level lists in multi-scale mode."""

    C: object
    U: object
    V: object
    t: int = 0


@dataclass
class SolverConfig:
    """Solver hyperparameters.

    Step sizes left at None are resolved to 0.99 over the squared operator
    norm of the matching synthesis operator, which guarantees descent with
    tied dictionaries. ``prox`` is ``"soft"``, ``"identity"`` or any callable
    ``(array, threshold) -> array`` that is non-expansive.
    """

    T: int = 4
    eta_u: float | None = None
    eta_v: float | None = None
    eta_c: float | None = None
    lambda_u: float = 1e-3
    lambda_v: float = 1e-3
    lambda_c: float = 1e-3
    prox: str | Callable = "soft"
    tied: bool = True
    scale_levels: int = 1
    widths: tuple | None = None

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("stage count T must be >= 0")
        for name in ("eta_u", "eta_v", "eta_c"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.lambda_u, self.lambda_v, self.lambda_c) < 0:
            raise ValueError("regularization weights must be >= 0")


class TraceRow(NamedTuple):
    iteration: int
    objective: float
    fid1: float
    fid2: float
    l1_c: float
    l1_u: float
    l1_v: float


# ---------------------------------------------------------------------------
# Construction and serialization.
# ---------------------------------------------------------------------------

def random_model_dictionaries(num_filters: int = 8, filter_size: int = 3,
                              widths=None, seed: int = 0,
                              tied: bool = True) -> ModelDictionaries:
    """Seeded random dictionaries with unit-norm filters.

    Pass ``widths`` (per-level channel counts) for the multi-scale variant;
    otherwise single-scale banks with ``num_filters`` channels are built.
    """
    rng = np.random.default_rng(seed)
    pairs = {}
    for name in _MODEL_BANK_NAMES:
        if widths is not None:
            op = dct.random_msdict(widths, 1, filter_size, rng)
        else:
            op = dct.random_bank(num_filters, 1, filter_size, rng)
        pairs[name] = dct.UntiedPair.tied(op) if tied else dct.UntiedPair.untied(op)
    return ModelDictionaries(dc=pairs["Dc"], du=pairs["Du"], hc=pairs["Hc"],
                             hv=pairs["Hv"], qc=pairs["Qc"], qv=pairs["Qv"])


def save_model_dictionaries(path, dicts: ModelDictionaries) -> None:
    pairs = {"Dc": dicts.dc, "Du": dicts.du, "Hc": dicts.hc,
             "Hv": dicts.hv, "Qc": dicts.qc, "Qv": dicts.qv}
    dct.save_dictionary_dir(path, pairs)


def load_model_dictionaries(path) -> ModelDictionaries:
    pairs, _ = dct.load_dictionary_dir(path)
    missing = [n for n in _MODEL_BANK_NAMES if n not in pairs]
    if missing:
        raise ValueError(f"dictionary directory {path} is missing banks {missing}")
    return ModelDictionaries(dc=pairs["Dc"], du=pairs["Du"], hc=pairs["Hc"],
                             hv=pairs["Hv"], qc=pairs["Qc"], qv=pairs["Qv"])


# ---------------------------------------------------------------------------
# Proximal operator.
# ---------------------------------------------------------------------------

def soft_threshold(x, theta: float) -> np.ndarray:
    """Elementwise sign(x) * max(|x| - theta, 0), the prox of theta * L1."""
    if theta < 0:
        raise ValueError("threshold must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0.0)


def _prox_fn(cfg: SolverConfig) -> Callable:
    if callable(cfg.prox):
        return cfg.prox
    if cfg.prox == "soft":
        return soft_threshold
    if cfg.prox == "identity":
        return lambda x, theta: np.asarray(x, dtype=np.float64)
    raise ValueError(f"unknown prox {cfg.prox!r}")


def _prox_step(cfg: SolverConfig, feats, theta: float):
    fn = _prox_fn(cfg)
    return core.pyramid_map(lambda a: fn(a, theta), feats)


# ---------------------------------------------------------------------------
# Feature initialization, gradients, updates.
# ---------------------------------------------------------------------------

def init_features(dicts: ModelDictionaries, x1, x2) -> FeatureState:
    """Analysis-based initialization: unique features from the per-image
    analysis operators, common features from the stacked analysis of both."""
    x1 = core.as_tensor(x1, "x1")
    x2 = core.as_tensor(x2, "x2")
    if x1.shape != x2.shape:
        raise ValueError(f"image shapes differ: {x1.shape} vs {x2.shape}")
    u0 = dct.apply_analysis(dicts.du, x1)
    v0 = dct.apply_analysis(dicts.hv, x2)
    c0 = dct.apply_analysis(dicts.lc, np.stack([x1, x2], axis=-1))
    return FeatureState(C=c0, U=u0, V=v0, t=0)


def _fit_ref(dicts: ModelDictionaries, state: FeatureState) -> np.ndarray:
    return (dct.pair_synthesize(dicts.dc, state.C)
            + dct.pair_synthesize(dicts.du, state.U))


def _fit_tgt(dicts: ModelDictionaries, state: FeatureState) -> np.ndarray:
    return (dct.pair_synthesize(dicts.hc, state.C)
            + dct.pair_synthesize(dicts.hv, state.V))


def grad_u(state: FeatureState, dicts: ModelDictionaries, x1):
    """Analysis of the reference fit residual; the exact gradient of the
    reference fidelity term with respect to U when dictionaries are tied."""
    r = _fit_ref(dicts, state) - core.as_tensor(x1, "x1")
    return dct.apply_analysis(dicts.du, r)


def grad_v(state: FeatureState, dicts: ModelDictionaries, x2):
    """Target-side mirror of :func:`grad_u`."""
    r = _fit_tgt(dicts, state) - core.as_tensor(x2, "x2")
    return dct.apply_analysis(dicts.hv, r)


def build_stacked_residual(state: FeatureState, dicts: ModelDictionaries,
                           x1, x2) -> np.ndarray:
    """Two-channel stack of both images minus their unique syntheses."""
    x1 = core.as_tensor(x1, "x1")
    x2 = core.as_tensor(x2, "x2")
    r1 = x1 - dct.pair_synthesize(dicts.du, state.U)
    r2 = x2 - dct.pair_synthesize(dicts.hv, state.V)
    return np.stack([r1, r2], axis=-1)


def grad_c(state: FeatureState, dicts: ModelDictionaries, stacked_residual):
    """Stacked-operator analysis of the common fit residual."""
    m = core.as_tensor(stacked_residual, "stacked residual")
    r = dct.pair_synthesize(dicts.lc, state.C) - m
    return dct.apply_analysis(dicts.lc, r)


def _require_step(eta: float | None, name: str) -> float:
    if eta is None:
        raise ValueError(f"{name} is unset; call resolve_steps first")
    return float(eta)


def update_u(state: FeatureState, dicts: ModelDictionaries, x1, cfg: SolverConfig):
    """One proximal-gradient step on U; returns the new U only."""
    eta = _require_step(cfg.eta_u, "eta_u")
    z = core.pyramid_axpy(-eta, grad_u(state, dicts, x1), state.U)
    return _prox_step(cfg, z, eta * cfg.lambda_u)


def update_v(state: FeatureState, dicts: ModelDictionaries, x2, cfg: SolverConfig):
    """One proximal-gradient step on V; returns the new V only."""
    eta = _require_step(cfg.eta_v, "eta_v")
    z = core.pyramid_axpy(-eta, grad_v(state, dicts, x2), state.V)
    return _prox_step(cfg, z, eta * cfg.lambda_v)


def update_c(state: FeatureState, dicts: ModelDictionaries, stacked_residual,
             cfg: SolverConfig):
    """One proximal-gradient step on C; returns the new C only."""
    eta = _require_step(cfg.eta_c, "eta_c")
    z = core.pyramid_axpy(-eta, grad_c(state, dicts, stacked_residual), state.C)
    return _prox_step(cfg, z, eta * cfg.lambda_c)


# ---------------------------------------------------------------------------
# Objective, iteration loop, reconstruction.
# ---------------------------------------------------------------------------

def objective_terms(state: FeatureState, dicts: ModelDictionaries, x1, x2):
    """(fid1, fid2, l1_c, l1_u, l1_v): the two quadratic fidelity terms and
    the raw (unweighted) L1 norms of the feature stacks."""
    x1 = core.as_tensor(x1, "x1")
    x2 = core.as_tensor(x2, "x2")
    r1 = x1 - _fit_ref(dicts, state)
    r2 = x2 - _fit_tgt(dicts, state)
    return (0.5 * float((r1 ** 2).sum()), 0.5 * float((r2 ** 2).sum()),
            core.pyramid_l1(state.C), core.pyramid_l1(state.U),
            core.pyramid_l1(state.V))


def objective_value(state: FeatureState, dicts: ModelDictionaries, x1, x2,
                    cfg: SolverConfig) -> float:
    """Fidelity terms plus the weighted L1 penalties."""
    fid1, fid2, l1c, l1u, l1v = objective_terms(state, dicts, x1, x2)
    return fid1 + fid2 + cfg.lambda_c * l1c + cfg.lambda_u * l1u + cfg.lambda_v * l1v


def resolve_steps(cfg: SolverConfig, dicts: ModelDictionaries,
                  spatial_shape) -> SolverConfig:
    """Fill unset step sizes with 0.99 / squared synthesis operator norm,
    estimated by power iteration at the given image size."""
    def auto(op) -> float:
        nrm = dct.operator_norm(op, spatial_shape)
        return 0.99 / max(nrm * nrm, 1e-12)

    return replace(
        cfg,
        eta_u=cfg.eta_u if cfg.eta_u is not None else auto(dicts.du),
        eta_v=cfg.eta_v if cfg.eta_v is not None else auto(dicts.hv),
        eta_c=cfg.eta_c if cfg.eta_c is not None else auto(dicts.lc),
    )


def _trace_row(t, state, dicts, x1, x2, cfg) -> TraceRow:
    fid1, fid2, l1c, l1u, l1v = objective_terms(state, dicts, x1, x2)
    obj = fid1 + fid2 + cfg.lambda_c * l1c + cfg.lambda_u * l1u + cfg.lambda_v * l1v
    return TraceRow(t, obj, fid1, fid2, l1c, l1u, l1v)


def step_block(state: FeatureState, dicts: ModelDictionaries, x1, x2,
               cfg: SolverConfig) -> FeatureState:
    """One full update block: U, then V, then C on the stacked residual
    built from the freshly updated U and V. Step sizes must be resolved."""
    state = replace(state, U=update_u(state, dicts, x1, cfg))
    state = replace(state, V=update_v(state, dicts, x2, cfg))
    stacked = build_stacked_residual(state, dicts, x1, x2)
    new_c = update_c(state, dicts, stacked, cfg)
    return FeatureState(C=new_c, U=state.U, V=state.V, t=state.t + 1)


def iterate(dicts: ModelDictionaries, x1, x2, cfg: SolverConfig):
    """Initialize, run T update blocks, and return (final state, trace).

    The objective trace has one row per block plus the initial row.
    """
    x1 = core.as_tensor(x1, "x1")
    x2 = core.as_tensor(x2, "x2")
    cfg = resolve_steps(cfg, dicts, x1.shape)
    state = init_features(dicts, x1, x2)
    trace = [_trace_row(0, state, dicts, x1, x2, cfg)]
    for _ in range(cfg.T):
        state = step_block(state, dicts, x1, x2, cfg)
        trace.append(_trace_row(state.t, state, dicts, x1, x2, cfg))
    return state, trace


def reconstruct(state: FeatureState, dicts: ModelDictionaries) -> np.ndarray:
    """Restored target: Qc synthesis of C plus Qv synthesis of V."""
    return (dct.pair_synthesize(dicts.qc, state.C)
            + dct.pair_synthesize(dicts.qv, state.V))


def component_images(state: FeatureState, dicts: ModelDictionaries) -> dict:
    """The four decomposed component images, for inspection dumps."""
    return {
        "ref_common": dct.pair_synthesize(dicts.dc, state.C),
        "ref_unique": dct.pair_synthesize(dicts.du, state.U),
        "tgt_common": dct.pair_synthesize(dicts.hc, state.C),
        "tgt_unique": dct.pair_synthesize(dicts.hv, state.V),
    }
