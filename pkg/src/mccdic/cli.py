"""Command-line front end.

Subcommands compose the library into reproducible pipelines:

    phantom   render a synthetic multi-contrast pair
    degrade   simulate the low-resolution / undersampled target
    learn     fit dictionaries to a corpus of image pairs
    solve     run the solver and reconstruct the target
    eval      image-quality report against a ground truth
    pipeline  phantom -> degrade -> (learn) -> solve -> eval from a config file

Every invocation writes a JSON manifest next to its outputs recording the
full parameter set, seeds and tool version. All randomness flows from
explicit seeds, so re-running a command reproduces its MCT1/CSV outputs
byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from mccdic import __version__, core, degrade, dict_learn, metrics, phantom, solver

_CSV_FLOAT = "{:.12g}"


# ---------------------------------------------------------------------------
# Small output helpers.
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return _CSV_FLOAT.format(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_pgm(path, image) -> None:
    """8-bit binary PGM with min-max scaling; the scale is kept in a comment."""
    img = core.as_tensor(image, "image")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(img)
    header = f"P5\n# min={lo:.12g} max={hi:.12g}\n{img.shape[1]} {img.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(scaled.astype(np.uint8).tobytes())


def write_manifest(path, command: str, params: dict, inputs, outputs,
                   started: float) -> None:
    params = {k: v for k, v in params.items() if not callable(v)}
    doc = {
        "tool": "mccdic",
        "version": __version__,
        "command": command,
        "parameters": {k: params[k] for k in sorted(params)},
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(p) for p in outputs),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_config(path) -> dict:
    """Parse a plain-text key=value config; '#' starts a comment."""
    cfg = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            cfg[key.strip()] = val.strip()
    return cfg


def _check_finite_stage(stage: str, arrays: dict) -> None:
    for name, arr in arrays.items():
        if not np.isfinite(arr).all():
            raise RuntimeError(f"stage {stage}: non-finite values in {name}")


def _solver_config(args_or_cfg) -> solver.SolverConfig:
    get = args_or_cfg.get if isinstance(args_or_cfg, dict) else \
        lambda k, d=None: getattr(args_or_cfg, k, d)
    widths = get("widths", None)
    if isinstance(widths, str):
        widths = tuple(int(w) for w in widths.split(",")) if widths else None
    return solver.SolverConfig(
        T=int(get("T", 4)),
        lambda_u=float(get("lambda_u", 1e-3)),
        lambda_v=float(get("lambda_v", 1e-3)),
        lambda_c=float(get("lambda_c", 1e-3)),
        prox=str(get("prox", "soft")),
        tied=bool(int(get("tied", 1))) if isinstance(args_or_cfg, dict) else get("tied", True),
        scale_levels=int(get("levels", 1)),
        widths=widths,
    )


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def _cmd_phantom(args) -> int:
    started = time.time()
    spec = phantom.random_phantom_spec(args.size, args.n_ellipses,
                                       inconsistent=args.inconsistent,
                                       seed=args.seed)
    x1, x2 = phantom.make_phantom_pair(spec)
    outputs = []
    for name, img in (("x1", x1), ("x2", x2)):
        mct = f"{args.out_prefix}_{name}.mct"
        core.save_mct(mct, img)
        write_pgm(f"{args.out_prefix}_{name}.pgm", img)
        outputs += [mct, f"{args.out_prefix}_{name}.pgm"]
    if spec.inconsistent is not None:
        region = phantom.ellipse_mask(spec.shape, spec.inconsistent).astype(np.float64)
        core.save_mct(f"{args.out_prefix}_region.mct", region)
        outputs.append(f"{args.out_prefix}_region.mct")
    write_manifest(f"{args.out_prefix}.manifest.json", "phantom", vars(args),
                   [], outputs, started)
    return 0


def _cmd_degrade(args) -> int:
    started = time.time()
    image = core.load_mct(args.infile)
    outputs = [args.out]
    if args.mode == "sr":
        out = degrade.kspace_center_crop_lr(image, args.scale)
    else:
        mask = degrade.make_cartesian_mask(*image.shape, accel=args.accel,
                                           center_frac=args.center_frac,
                                           seed=args.seed)
        out = degrade.undersample(image, mask)
        if args.mask_out:
            core.save_mct(args.mask_out, mask.values)
            outputs.append(args.mask_out)
    _check_finite_stage("degrade", {"output": out})
    core.save_mct(args.out, out)
    write_manifest(args.out + ".manifest.json", "degrade", vars(args),
                   [args.infile], outputs, started)
    return 0


def _load_corpus(corpus_dir):
    stems = sorted(
        f[:-len("_x1.mct")] for f in os.listdir(corpus_dir) if f.endswith("_x1.mct"))
    if not stems:
        raise FileNotFoundError(f"no *_x1.mct files in {corpus_dir}")
    pairs = []
    for stem in stems:
        x1 = core.load_mct(os.path.join(corpus_dir, stem + "_x1.mct"))
        x2 = core.load_mct(os.path.join(corpus_dir, stem + "_x2.mct"))
        pairs.append((x1, x2))
    return pairs


def _cmd_learn(args) -> int:
    started = time.time()
    pairs = _load_corpus(args.corpus)
    scfg = _solver_config(args)
    scfg.T = args.inner_T
    cfg = dict_learn.LearnConfig(
        epochs=args.epochs, solver=scfg, seed=args.seed,
        num_filters=args.K, filter_size=args.filter_size,
        widths=scfg.widths, threads=args.threads)
    dicts, log = dict_learn.learn(pairs, cfg)
    solver.save_model_dictionaries(args.out, dicts)
    outputs = [args.out]
    if args.log:
        write_csv(args.log, ["epoch", "objective", "recon_objective",
                             "step_dict", "step_q"], log)
        outputs.append(args.log)
    write_manifest(os.path.join(args.out, "learn.manifest.json"), "learn",
                   vars(args), [args.corpus], outputs, started)
    return 0


def _make_or_load_dicts(args, shape):
    if args.dict:
        return solver.load_model_dictionaries(args.dict)
    widths = tuple(int(w) for w in args.widths.split(",")) if args.widths else None
    return solver.random_model_dictionaries(
        num_filters=args.K, filter_size=args.filter_size, widths=widths,
        seed=args.dict_seed, tied=args.tied)


def _cmd_solve(args) -> int:
    started = time.time()
    x1 = core.load_mct(args.ref)
    x2 = core.load_mct(args.target)
    dicts = _make_or_load_dicts(args, x1.shape)
    cfg = _solver_config(args)
    state, trace = solver.iterate(dicts, x1, x2, cfg)
    rec = solver.reconstruct(state, dicts)
    _check_finite_stage("solve", {"reconstruction": rec})
    core.save_mct(args.out, rec)
    outputs = [args.out]
    if args.trace:
        write_csv(args.trace,
                  ["iter", "objective", "fid1", "fid2", "l1_c", "l1_u", "l1_v"],
                  trace)
        outputs.append(args.trace)
    if args.dump_components:
        os.makedirs(args.dump_components, exist_ok=True)
        for name, img in solver.component_images(state, dicts).items():
            base = os.path.join(args.dump_components, f"comp_{name}")
            core.save_mct(base + ".mct", img)
            write_pgm(base + ".pgm", img)
            outputs += [base + ".mct", base + ".pgm"]
    write_manifest(args.out + ".manifest.json", "solve", vars(args),
                   [args.ref, args.target, args.dict or ""], outputs, started)
    return 0


def _metric_row(rec, gt):
    return [metrics.psnr(rec, gt), metrics.ssim(rec, gt), metrics.rmse(rec, gt),
            100.0 * metrics.rmse(rec, gt)]


def _cmd_eval(args) -> int:
    started = time.time()
    rec = core.load_mct(args.rec)
    gt = core.load_mct(args.gt)
    write_csv(args.report, ["psnr", "ssim", "rmse", "rmse_x100"],
              [_metric_row(rec, gt)])
    write_manifest(args.report + ".manifest.json", "eval", vars(args),
                   [args.rec, args.gt], [args.report], started)
    return 0


# ---------------------------------------------------------------------------
# Pipeline.
# ---------------------------------------------------------------------------

_PIPELINE_DEFAULTS = {
    "task": "sr", "size": "128", "n_ellipses": "6", "inconsistent": "0",
    "phantom_seed": "1", "scale": "4", "accel": "4", "center_frac": "0.08",
    "mask_seed": "2", "epochs": "0", "corpus_pairs": "8", "corpus_seed": "100",
    "learn_seed": "7", "inner_T": "15", "K": "8", "filter_size": "3",
    "levels": "1", "widths": "", "dict_seed": "11", "T": "40",
    "lambda_u": "1e-3", "lambda_v": "1e-3", "lambda_c": "1e-3",
    "prox": "soft", "tied": "1",
}


def _run_pipeline(cfg: dict, outdir: str, created: list) -> None:
    def emit_mct(name, arr):
        path = os.path.join(outdir, name)
        core.save_mct(path, arr)
        created.append(path)
        return path

    def emit_pgm(name, arr):
        path = os.path.join(outdir, name)
        write_pgm(path, arr)
        created.append(path)

    task = cfg["task"]
    if task not in ("sr", "recon"):
        raise ValueError(f"unknown task {task!r}")
    size = int(cfg["size"])

    # Stage 1: phantom ground truth.
    spec = phantom.random_phantom_spec(size, int(cfg["n_ellipses"]),
                                       inconsistent=bool(int(cfg["inconsistent"])),
                                       seed=int(cfg["phantom_seed"]))
    x1, x2_gt = phantom.make_phantom_pair(spec)
    _check_finite_stage("phantom", {"x1": x1, "x2": x2_gt})
    emit_mct("x1.mct", x1)
    emit_mct("x2_gt.mct", x2_gt)
    emit_pgm("x1.pgm", x1)
    emit_pgm("x2_gt.pgm", x2_gt)

    # Stage 2: degradation; the degraded full-size image is both the solver
    # input and the zero-filled / zero-padded baseline.
    if task == "sr":
        lr = degrade.kspace_center_crop_lr(x2_gt, int(cfg["scale"]))
        x2_in = degrade.upsample_zero_pad(lr, int(cfg["scale"]))
        emit_mct("x2_lr.mct", lr)
    else:
        mask = degrade.make_cartesian_mask(size, size, accel=float(cfg["accel"]),
                                           center_frac=float(cfg["center_frac"]),
                                           seed=int(cfg["mask_seed"]))
        x2_in = degrade.undersample(x2_gt, mask)
        emit_mct("mask.mct", mask.values)
    _check_finite_stage("degrade", {"x2_in": x2_in})
    emit_mct("x2_in.mct", x2_in)
    emit_pgm("x2_in.pgm", x2_in)

    # Stage 3: dictionaries, learned on freshly generated clean pairs when
    # epochs > 0, else seeded random ones.
    scfg = _solver_config(cfg)
    epochs = int(cfg["epochs"])
    if epochs > 0:
        corpus = []
        corpus_seed = int(cfg["corpus_seed"])
        for i in range(int(cfg["corpus_pairs"])):
            cspec = phantom.random_phantom_spec(size, int(cfg["n_ellipses"]),
                                                seed=corpus_seed + i)
            corpus.append(phantom.make_phantom_pair(cspec))
        inner = solver.SolverConfig(
            T=int(cfg["inner_T"]), lambda_u=scfg.lambda_u, lambda_v=scfg.lambda_v,
            lambda_c=scfg.lambda_c, prox=scfg.prox, tied=scfg.tied,
            scale_levels=scfg.scale_levels, widths=scfg.widths)
        lcfg = dict_learn.LearnConfig(
            epochs=epochs, solver=inner, seed=int(cfg["learn_seed"]),
            num_filters=int(cfg["K"]), filter_size=int(cfg["filter_size"]),
            widths=scfg.widths)
        dicts, log = dict_learn.learn(corpus, lcfg)
        log_path = os.path.join(outdir, "learn.csv")
        write_csv(log_path, ["epoch", "objective", "recon_objective",
                             "step_dict", "step_q"], log)
        created.append(log_path)
    else:
        dicts = solver.random_model_dictionaries(
            num_filters=int(cfg["K"]), filter_size=int(cfg["filter_size"]),
            widths=scfg.widths, seed=int(cfg["dict_seed"]),
            tied=bool(int(cfg["tied"])))
    dict_dir = os.path.join(outdir, "dict")
    solver.save_model_dictionaries(dict_dir, dicts)
    created.append(dict_dir)

    # Stage 4: solve and reconstruct.
    state, trace = solver.iterate(dicts, x1, x2_in, scfg)
    rec = solver.reconstruct(state, dicts)
    _check_finite_stage("solve", {"reconstruction": rec})
    emit_mct("x2_rec.mct", rec)
    emit_pgm("x2_rec.pgm", rec)
    trace_path = os.path.join(outdir, "trace.csv")
    write_csv(trace_path, ["iter", "objective", "fid1", "fid2", "l1_c", "l1_u", "l1_v"],
              trace)
    created.append(trace_path)
    for name, img in solver.component_images(state, dicts).items():
        emit_mct(f"comp_{name}.mct", img)
        emit_pgm(f"comp_{name}.pgm", img)

    # Stage 5: metrics against the ground truth, baseline first.
    base_row = _metric_row(x2_in, x2_gt)
    rec_row = _metric_row(rec, x2_gt)
    report_path = os.path.join(outdir, "report.csv")
    write_csv(report_path,
              ["task", "psnr_baseline", "ssim_baseline", "rmse_baseline",
               "psnr", "ssim", "rmse", "rmse_x100", "psnr_gain_db"],
              [[task, base_row[0], base_row[1], base_row[2],
                rec_row[0], rec_row[1], rec_row[2], rec_row[3],
                rec_row[0] - base_row[0]]])
    created.append(report_path)


def _cmd_pipeline(args) -> int:
    started = time.time()
    cfg = dict(_PIPELINE_DEFAULTS)
    cfg.update(read_config(args.config))
    outdir = args.outdir or cfg.get("outdir")
    if not outdir:
        print("pipeline: no output directory (set outdir= or pass --outdir)",
              file=sys.stderr)
        return 2
    os.makedirs(outdir, exist_ok=True)
    created: list = []
    try:
        _run_pipeline(cfg, outdir, created)
    except Exception as exc:  # partial outputs are removed on failure
        for path in reversed(created):
            if os.path.isfile(path):
                os.unlink(path)
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return 1
    write_manifest(os.path.join(outdir, "manifest.json"), "pipeline",
                   {**cfg, "outdir": outdir}, [args.config], created, started)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------

def _add_solver_flags(p) -> None:
    p.add_argument("--T", type=int, default=4, help="number of update blocks")
    p.add_argument("--lambda-u", dest="lambda_u", type=float, default=1e-3)
    p.add_argument("--lambda-v", dest="lambda_v", type=float, default=1e-3)
    p.add_argument("--lambda-c", dest="lambda_c", type=float, default=1e-3)
    p.add_argument("--prox", choices=("soft", "identity"), default="soft")
    p.add_argument("--K", type=int, default=8, help="feature channels")
    p.add_argument("--filter-size", type=int, default=3)
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--widths", default="",
                   help="comma list of per-level channels (multi-scale)")
    tied = p.add_mutually_exclusive_group()
    tied.add_argument("--tied", dest="tied", action="store_true", default=True)
    tied.add_argument("--untied", dest="tied", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mccdic",
        description="Multi-contrast convolutional dictionary model tools")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="render a synthetic multi-contrast pair")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--n-ellipses", dest="n_ellipses", type=int, default=6)
    p.add_argument("--inconsistent", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", dest="out_prefix", required=True)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("degrade", help="simulate the degraded target image")
    p.add_argument("--mode", choices=("sr", "recon"), required=True)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--accel", type=float, default=4.0)
    p.add_argument("--center-frac", dest="center_frac", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", dest="mask_out", default="")
    p.set_defaults(func=_cmd_degrade)

    p = sub.add_parser("learn", help="fit dictionaries to a corpus of pairs")
    p.add_argument("--corpus", required=True,
                   help="directory of <stem>_x1.mct / <stem>_x2.mct pairs")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default="")
    p.add_argument("--inner-T", dest="inner_T", type=int, default=15,
                   help="solver blocks per feature inference")
    p.add_argument("--threads", type=int, default=None)
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_learn)

    p = sub.add_parser("solve", help="decompose and reconstruct the target")
    p.add_argument("--ref", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--dict", default="",
                   help="dictionary directory; omit for seeded random banks")
    p.add_argument("--dict-seed", dest="dict_seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default="")
    p.add_argument("--dump-components", dest="dump_components", default="")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("eval", help="image-quality report against a ground truth")
    p.add_argument("--rec", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", help="run the full experiment from a config")
    p.add_argument("config")
    p.add_argument("--outdir", default="")
    p.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"mccdic {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
