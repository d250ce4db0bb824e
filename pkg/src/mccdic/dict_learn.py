"""Classical alternating dictionary learning.

Each epoch infers features for every corpus pair with the solver (cold start
by default), then takes a projected gradient step on the decomposition banks
(Dc, Du, Hc, Hv) against the two fidelity terms and a separate step on the
reconstruction banks (Qc, Qv) against the ground-truth target images. Filters
stay inside the unit Frobenius ball, and step sizes are found by a
backtracking line search so the training objective never increases within a
dictionary step.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from mccdic import core
from mccdic import dictionary as dct
from mccdic import solver

__all__ = [
    "LearnConfig",
    "dict_gradient",
    "project_unit_ball",
    "learn",
]


@dataclass
class LearnConfig:
    """Settings for :func:`learn`.

    ``step`` of None enables backtracking from an adaptive initial value; a
    fixed positive value is used as the starting step instead, and 0 disables
    dictionary updates entirely. ``num_filters``/``filter_size`` (or
    ``widths`` for the multi-scale variant) shape the initial random
    dictionaries. ``threads`` caps the feature-inference worker pool and
    falls back to the MCCDIC_THREADS environment variable.
    """

    epochs: int
    solver: solver.SolverConfig = field(default_factory=solver.SolverConfig)
    seed: int = 0
    step: float | None = None
    batch_size: int | None = None
    warm_start: bool = False
    num_filters: int = 8
    filter_size: int = 3
    widths: tuple | None = None
    threads: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.step is not None and self.step < 0:
            raise ValueError("step must be >= 0")


# ---------------------------------------------------------------------------
# Filter gradients.
# ---------------------------------------------------------------------------

def dict_gradient(bank: dct.DictionaryBank, features, residual) -> np.ndarray:
    """Gradient of 0.5 * ||target - synthesis(features)||^2 in the filters,
    evaluated at the current ``residual = target - synthesis(features)``.

    Returns an array shaped like ``bank.filters``; a zero residual gives zero
    gradients.
    """
    feats = core.as_tensor(features, "features")
    if feats.ndim != 3 or feats.shape[2] != bank.num_filters:
        raise ValueError(
            f"features must be (m, n, {bank.num_filters}), got {feats.shape}")
    res3 = dct._as_image3(residual, bank.image_channels)
    return -dct._tap_outer(feats, res3, bank.filter_size)


def _ms_param_grads(msd: dct.MultiScaleDictionary, feats, residual):
    """Filter and up-kernel gradients of the multi-scale synthesis loss, by
    reverse accumulation through the per-level linear stages."""
    levels = msd.levels
    carriers = [None] * levels
    carriers[-1] = dct._synth3(msd.banks[-1].filters, feats[-1])
    for l in range(levels - 2, -1, -1):
        carriers[l] = (dct._up_apply(msd.up_kernels[l], carriers[l + 1])
                       + dct._synth3(msd.banks[l].filters, feats[l]))
    g = -dct._as_image3(residual, msd.image_channels)
    bank_grads = []
    up_grads = []
    for l in range(levels - 1):
        bank_grads.append(dct._tap_outer(feats[l], g, msd.banks[l].filter_size))
        m2, n2, t = g.shape
        gview = g.reshape(m2 // 2, 2, n2 // 2, 2, t)
        up_grads.append(np.einsum("ijd,iajbc->dcab", carriers[l + 1], gview,
                                  optimize=True))
        g = dct._down_apply(msd.up_kernels[l], g)
    bank_grads.append(dct._tap_outer(feats[-1], g, msd.banks[-1].filter_size))
    return bank_grads, up_grads


def _param_grads(op, feats, residual):
    if isinstance(op, dct.MultiScaleDictionary):
        return _ms_param_grads(op, feats, residual)
    return [dict_gradient(op, feats, residual)], []


def _zero_grads(op):
    if isinstance(op, dct.MultiScaleDictionary):
        return ([np.zeros_like(b.filters) for b in op.banks],
                [np.zeros_like(k) for k in op.up_kernels])
    return [np.zeros_like(op.filters)], []


def _add_grads(acc, new):
    for a, b in zip(acc[0], new[0], strict=True):
        a += b
    for a, b in zip(acc[1], new[1], strict=True):
        a += b


# ---------------------------------------------------------------------------
# Unit-ball projection and parameter steps.
# ---------------------------------------------------------------------------

def _project_filters(filters: np.ndarray) -> np.ndarray:
    norms = np.sqrt((filters ** 2).sum(axis=(1, 2, 3), keepdims=True))
    return filters / np.maximum(norms, 1.0)


def project_unit_ball(bank: dct.DictionaryBank) -> dct.DictionaryBank:
    """Rescale each filter with Frobenius norm above 1 back to norm 1."""
    return dct.DictionaryBank(_project_filters(bank.filters))


def _step_op(op, grads, gamma: float):
    bank_grads, up_grads = grads
    if isinstance(op, dct.MultiScaleDictionary):
        banks = tuple(
            dct.DictionaryBank(_project_filters(b.filters - gamma * g))
            for b, g in zip(op.banks, bank_grads))
        ups = tuple(_project_filters(k - gamma * g)
                    for k, g in zip(op.up_kernels, up_grads))
        return dct.MultiScaleDictionary(banks, ups)
    return dct.DictionaryBank(_project_filters(op.filters - gamma * bank_grads[0]))


def _step_pair(pair: dct.UntiedPair, grads, gamma: float) -> dct.UntiedPair:
    # The fidelity terms touch only the synthesis side; an untied analysis
    # side keeps its current filters and therefore diverges from it.
    new_syn = _step_op(pair.synthesis, grads, gamma)
    if pair.is_tied:
        return dct.UntiedPair.tied(new_syn)
    return dct.UntiedPair(synthesis=new_syn, analysis=pair.analysis)


# ---------------------------------------------------------------------------
# Learning loop.
# ---------------------------------------------------------------------------

def _worker_count(cfg: LearnConfig) -> int:
    if cfg.threads is not None:
        return max(1, cfg.threads)
    env = os.environ.get("MCCDIC_THREADS", "").strip()
    return max(1, int(env)) if env else 1


def _infer_features(dicts, pairs, cfg: LearnConfig, warm):
    # One step-size resolution per epoch; the dictionaries are fixed until
    # the next dictionary step, and all pairs share one image shape.
    scfg = solver.resolve_steps(cfg.solver, dicts, pairs[0][0].shape)

    def solve_one(i):
        x1, x2 = pairs[i]
        state = warm[i] if warm is not None else solver.init_features(dicts, x1, x2)
        for _ in range(scfg.T):
            state = solver.step_block(state, dicts, x1, x2, scfg)
        return state

    workers = _worker_count(cfg)
    if workers == 1 or len(pairs) == 1:
        return [solve_one(i) for i in range(len(pairs))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(solve_one, range(len(pairs))))


def _model_fidelity(dicts, pairs, states) -> float:
    total = 0.0
    for (x1, x2), st in zip(pairs, states):
        fid1, fid2, _, _, _ = solver.objective_terms(st, dicts, x1, x2)
        total += fid1 + fid2
    return total


def _recon_fidelity(dicts, pairs, states) -> float:
    total = 0.0
    for (_, x2), st in zip(pairs, states):
        r = x2 - solver.reconstruct(st, dicts)
        total += 0.5 * float((r ** 2).sum())
    return total


def _l1_total(scfg: solver.SolverConfig, states) -> float:
    total = 0.0
    for st in states:
        total += (scfg.lambda_c * core.pyramid_l1(st.C)
                  + scfg.lambda_u * core.pyramid_l1(st.U)
                  + scfg.lambda_v * core.pyramid_l1(st.V))
    return total


def _backtrack(apply_step, objective, current: float, gamma0: float):
    """Halve the step until the objective stops increasing. Returns
    (candidate or None, gamma used)."""
    gamma = gamma0
    for _ in range(40):
        candidate = apply_step(gamma)
        if objective(candidate) <= current + 1e-12 * max(1.0, abs(current)):
            return candidate, gamma
        gamma *= 0.5
    return None, 0.0


def learn(corpus, cfg: LearnConfig):
    """Fit model dictionaries to co-registered image pairs.

    ``corpus`` is a list of (reference, target) image pairs of one common
    size. Returns (dictionaries, log); the log holds one row per epoch,
    ``(epoch, objective, recon_objective, step_dict, step_q)``, with the
    objective evaluated after that epoch's dictionary step at the epoch's
    features. Deterministic for a fixed seed and corpus order.
    """
    if not corpus:
        raise ValueError("corpus must contain at least one image pair")
    pairs = [(core.as_tensor(a, "x1"), core.as_tensor(b, "x2")) for a, b in corpus]
    shape = pairs[0][0].shape
    for a, b in pairs:
        if a.shape != shape or b.shape != shape:
            raise ValueError("all corpus images must share one shape")

    dicts = solver.random_model_dictionaries(
        num_filters=cfg.num_filters, filter_size=cfg.filter_size,
        widths=cfg.widths, seed=cfg.seed, tied=cfg.solver.tied)
    auto_step = cfg.step is None
    frozen = cfg.step == 0
    gamma_d = 1.0 if auto_step else float(cfg.step)
    gamma_q = gamma_d
    batch = cfg.batch_size or len(pairs)
    log = []
    states = None

    for epoch in range(cfg.epochs):
        states = _infer_features(dicts, pairs, cfg,
                                 states if (cfg.warm_start and states) else None)
        step_d_used = 0.0
        step_q_used = 0.0
        for lo in range(0, len(pairs), batch):
            sel = range(lo, min(lo + batch, len(pairs)))
            bpairs = [pairs[i] for i in sel]
            bstates = [states[i] for i in sel]
            if frozen:
                continue

            grads = {name: _zero_grads(getattr(dicts, name).synthesis)
                     for name in ("dc", "du", "hc", "hv")}
            for (x1, x2), st in zip(bpairs, bstates):
                r1 = x1 - (dct.pair_synthesize(dicts.dc, st.C)
                           + dct.pair_synthesize(dicts.du, st.U))
                r2 = x2 - (dct.pair_synthesize(dicts.hc, st.C)
                           + dct.pair_synthesize(dicts.hv, st.V))
                _add_grads(grads["dc"], _param_grads(dicts.dc.synthesis, st.C, r1))
                _add_grads(grads["du"], _param_grads(dicts.du.synthesis, st.U, r1))
                _add_grads(grads["hc"], _param_grads(dicts.hc.synthesis, st.C, r2))
                _add_grads(grads["hv"], _param_grads(dicts.hv.synthesis, st.V, r2))

            def model_step(gamma, dicts=dicts, grads=grads):
                return replace(dicts,
                               dc=_step_pair(dicts.dc, grads["dc"], gamma),
                               du=_step_pair(dicts.du, grads["du"], gamma),
                               hc=_step_pair(dicts.hc, grads["hc"], gamma),
                               hv=_step_pair(dicts.hv, grads["hv"], gamma))

            cand, used = _backtrack(
                model_step, lambda d: _model_fidelity(d, bpairs, bstates),
                _model_fidelity(dicts, bpairs, bstates), gamma_d)
            if cand is not None:
                dicts = cand
                step_d_used = used
                if auto_step:
                    gamma_d = min(used * 2.0, 1e6)

            qgrads = {name: _zero_grads(getattr(dicts, name).synthesis)
                      for name in ("qc", "qv")}
            for (_, x2), st in zip(bpairs, bstates):
                rq = x2 - solver.reconstruct(st, dicts)
                _add_grads(qgrads["qc"], _param_grads(dicts.qc.synthesis, st.C, rq))
                _add_grads(qgrads["qv"], _param_grads(dicts.qv.synthesis, st.V, rq))

            def q_step(gamma, dicts=dicts, qgrads=qgrads):
                return replace(dicts,
                               qc=_step_pair(dicts.qc, qgrads["qc"], gamma),
                               qv=_step_pair(dicts.qv, qgrads["qv"], gamma))

            cand, used = _backtrack(
                q_step, lambda d: _recon_fidelity(d, bpairs, bstates),
                _recon_fidelity(dicts, bpairs, bstates), gamma_q)
            if cand is not None:
                dicts = cand
                step_q_used = used
                if auto_step:
                    gamma_q = min(used * 2.0, 1e6)

        objective = _model_fidelity(dicts, pairs, states) + _l1_total(cfg.solver, states)
        log.append((epoch, objective, _recon_fidelity(dicts, pairs, states),
                    step_d_used, step_q_used))
    return dicts, log
