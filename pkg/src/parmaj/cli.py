"""Command-line entry points.

    parmaj toy sweep | toy collapse
    parmaj check
    parmaj denoise train | denoise eval
    parmaj tv-baseline
    parmaj segment train | segment eval

Every command accepts ``--config`` (a JSON document with RunConfig fields),
``--seed`` and ``--out``; flags override the config file.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, io, segmentation, toy
from .checks import run_checks
from .errors import ContractError, FormatError

log = logging.getLogger("parmaj")

DEFAULT_COLLAPSE = [(2.0, 6.0), (1.0, 2.9), (0.5, 1.6)]


def _config(args, pipeline):
    cfg = io.RunConfig.from_json(args.config) if args.config else io.RunConfig()
    cfg.pipeline = pipeline
    for name in ("seed", "out", "input", "model", "sigma", "kind", "lam", "epochs", "surrogate_iterations",
                 "outer_iterations", "patches"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "timing", False):
        cfg.timing = True
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    return cfg


def _path(cfg, name):
    return os.path.join(cfg.out, name)


# -- toy -----------------------------------------------------------------------

def cmd_toy_sweep(args):
    cfg = _config(args, "toy")
    inst = toy.ToyInstance(cfg.x_star, cfg.y)
    rows = toy.sweep(inst, np.linspace(cfg.theta_lo, cfg.theta_hi, cfg.theta_points))
    io.emit(rows, _path(cfg, "toy_sweep.csv"), "csv", toy.COLUMNS)
    return 0


def cmd_toy_collapse(args):
    cfg = _config(args, "toy")
    samples = cfg.extra.get("samples", DEFAULT_COLLAPSE)
    rows = toy.collapse_sweep(samples, np.linspace(cfg.theta_lo, cfg.theta_hi, cfg.theta_points))
    io.emit(rows, _path(cfg, "toy_collapse.csv"), "csv", ("theta", "naive", "reformulated"))
    return 0


def cmd_check(args):
    return 1 if run_checks() else 0


# -- denoising -------------------------------------------------------------------

def _denoise_corpus(cfg):
    if cfg.input:
        image = io.load_image(cfg.input)
        train, test, _ = io.extract_patches(image, cfg.patch_side, 2 * cfg.patches, cfg.seed)
        return io.make_pairs(train, cfg.sigma, cfg.seed + 1), io.make_pairs(test, cfg.sigma, cfg.seed + 2)
    return io.denoise_corpus(cfg.seed, cfg.patches, cfg.patch_side, cfg.sigma)


def _denoise_config(cfg):
    return analysis.DenoiseConfig(sigma=cfg.sigma, K=cfg.filters, f=cfg.filter_size, seed=cfg.seed,
                                  surrogate_iterations=cfg.surrogate_iterations,
                                  outer_iterations=cfg.outer_iterations, timing=cfg.timing)


def cmd_denoise_train(args):
    cfg = _config(args, "denoise-train")
    train, test = _denoise_corpus(cfg)
    dcfg = _denoise_config(cfg)
    records = []
    report, traces = analysis.run_iterative_denoise_training(train, test, dcfg, on_record=records.append)
    io.emit(report, _path(cfg, "denoise_report.json"))
    io.emit([(i, v) for i, v in enumerate(traces["surrogate"])], _path(cfg, "surrogate_trace.csv"), "csv",
            ("epoch", "surrogate"))
    io.emit(records, _path(cfg, "iterations.csv"), "csv", ("iteration", "tau", "surrogate", "loss", "accepted"))
    bank = traces["bank_iter"]
    io.emit({"K": bank.K, "f": bank.f, "coeffs": bank.coeffs}, _path(cfg, "filters.json"))
    print(f"psnr single {report['psnr_single']:.3f} dB, iterative {report['psnr_iter']:.3f} dB")
    return 0


def _load_bank(path):
    import json
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return analysis.FilterBank(np.array(doc["coeffs"], dtype=float), int(doc["f"]))


def cmd_denoise_eval(args):
    cfg = _config(args, "denoise-eval")
    if not cfg.model:
        raise ContractError("denoise eval needs --model <filters.json>")
    bank = _load_bank(cfg.model)
    _, test = _denoise_corpus(cfg)
    metrics = {"filters": {"K": bank.K, "f": bank.f}, "psnr": analysis.evaluate(bank, test),
               "psnr_noisy": analysis.mean_psnr([y for _, y in test], [x for x, _ in test])}
    io.emit(metrics, _path(cfg, "denoise_eval.json"))
    print(f"psnr {metrics['psnr']:.3f} dB (noisy {metrics['psnr_noisy']:.3f} dB)")
    return 0


def cmd_tv_baseline(args):
    cfg = _config(args, "tv-baseline")
    _, test = _denoise_corpus(cfg)
    alpha, value = analysis.tv_baseline(test, cfg.tv_lo, cfg.tv_hi, cfg.tv_points)
    io.emit({"alpha": alpha, "psnr": value}, _path(cfg, "tv_baseline.json"))
    print(f"tv weight {alpha:.4g}, psnr {value:.3f} dB")
    return 0


# -- segmentation ---------------------------------------------------------------

def load_labeled_pairs(directory, C):
    """Pairs from ``<name>.png`` (RGB) and ``<name>_labels.png`` (8-bit class indices)."""
    pairs = []
    for label_path in sorted(Path(directory).glob("*_labels.png")):
        image_path = label_path.with_name(label_path.name[:-len("_labels.png")] + ".png")
        labels = io.load_image(label_path).astype(int)
        image = io.load_image(image_path, gray=False)
        if image.shape[:2] != labels.shape:
            raise FormatError(f"{image_path}: size differs from its label map")
        if labels.max() >= C:
            raise FormatError(f"{label_path}: class index {labels.max()} out of range for {C} classes")
        pairs.append((segmentation.one_hot(labels, C), image))
    if not pairs:
        raise FormatError(f"{directory}: no '*_labels.png' files")
    return pairs


def _segment_corpus(cfg):
    if cfg.input:
        return load_labeled_pairs(cfg.input, cfg.classes)
    return segmentation.synth_corpus(cfg.seed, cfg.images, cfg.height, cfg.width, cfg.classes)


def cmd_segment_train(args):
    cfg = _config(args, "segment-train")
    corpus = _segment_corpus(cfg)
    scfg = segmentation.SegmentConfig(epochs=cfg.epochs, outer_iterations=cfg.outer_iterations)
    run = segmentation.train_segmentation(corpus, cfg.kind, cfg.lam, scfg)
    io.emit([(e, cfg.kind, a) for e, a in run.accuracy], _path(cfg, "accuracy.csv"), "csv",
            ("epoch", "kind", "accuracy"))
    pot = run.potential
    io.emit({"kind": cfg.kind, "lam": cfg.lam, "final_accuracy": run.accuracy[-1][1],
             "objective": run.objective[-1]}, _path(cfg, "segment_metrics.json"))
    io.emit({"C": pot.C, "c_in": pot.c_in, "kernels": pot.kernels, "bias": pot.bias},
            _path(cfg, "potential.json"))
    print(f"{cfg.kind}: final training accuracy {run.accuracy[-1][1]:.4f}")
    return 0


def cmd_segment_eval(args):
    import json
    cfg = _config(args, "segment-eval")
    if not cfg.model:
        raise ContractError("segment eval needs --model <potential.json>")
    with open(cfg.model, encoding="utf-8") as fh:
        doc = json.load(fh)
    pot = segmentation.LinearPotential(np.array(doc["kernels"], dtype=float), np.array(doc["bias"], dtype=float))
    corpus = [(x, y) for x, y in _segment_corpus(cfg)]
    acc = segmentation.corpus_accuracy(pot, corpus, cfg.lam)
    io.emit({"lam": cfg.lam, "accuracy": acc}, _path(cfg, "segment_eval.json"))
    print(f"accuracy {acc:.4f}")
    return 0


# -- parser -----------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser():
    parser = argparse.ArgumentParser(prog="parmaj", description="Parametric majorization for bi-level training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="one-dimensional sparsity toy")
    tsub = p.add_subparsers(dest="action", required=True)
    for name, fn, helptext in (("sweep", cmd_toy_sweep, "surrogate values over a theta grid"),
                               ("collapse", cmd_toy_collapse, "energy-collapse scaling example")):
        q = tsub.add_parser(name, help=helptext)
        _common(q)
        q.set_defaults(func=fn)

    p = sub.add_parser("check", help="run the invariant suite")
    _common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("denoise", help="analysis-operator denoising")
    dsub = p.add_subparsers(dest="action", required=True)
    q = dsub.add_parser("train", help="surrogate plus iterative training")
    _common(q)
    q.add_argument("--input", help="grayscale image to cut patches from (synthetic if omitted)")
    q.add_argument("--sigma", type=float)
    q.add_argument("--patches", type=int)
    q.add_argument("--surrogate-iterations", dest="surrogate_iterations", type=int)
    q.add_argument("--outer-iterations", dest="outer_iterations", type=int)
    q.add_argument("--timing", action="store_true", help="record wall-clock seconds in the report")
    q.set_defaults(func=cmd_denoise_train)
    q = dsub.add_parser("eval", help="held-out PSNR of a trained filter bank")
    _common(q)
    q.add_argument("--input")
    q.add_argument("--model", required=False)
    q.add_argument("--sigma", type=float)
    q.add_argument("--patches", type=int)
    q.set_defaults(func=cmd_denoise_eval)

    p = sub.add_parser("tv-baseline", help="grid-searched TV denoising")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--sigma", type=float)
    p.add_argument("--patches", type=int)
    p.set_defaults(func=cmd_tv_baseline)

    p = sub.add_parser("segment", help="variational segmentation")
    ssub = p.add_subparsers(dest="action", required=True)
    q = ssub.add_parser("train", help="train a linear potential")
    _common(q)
    q.add_argument("--input", help="directory of <name>.png / <name>_labels.png pairs (synthetic if omitted)")
    q.add_argument("--kind", choices=("cross-entropy", "bregman", "partial", "iterative"))
    q.add_argument("--lam", type=float)
    q.add_argument("--epochs", type=int)
    q.add_argument("--outer-iterations", dest="outer_iterations", type=int)
    q.set_defaults(func=cmd_segment_train)
    q = ssub.add_parser("eval", help="training-set accuracy of a potential")
    _common(q)
    q.add_argument("--input")
    q.add_argument("--model")
    q.add_argument("--lam", type=float)
    q.set_defaults(func=cmd_segment_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
