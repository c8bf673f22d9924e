"""Command-line entry point.

Every subcommand writes its outputs atomically and leaves a
``<name>.manifest.json`` run record beside them. Exit codes: 0 success,
1 bad input or usage, 2 internal failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from detkit import __version__
from detkit.anchors import PRESETS, config_to_json, coverage, load_config
from detkit.checks import run_kernel_checks
from detkit.datasets import (
    FormatError,
    SyntheticSpec,
    atomic_write,
    load_corpus,
    load_predictions,
    save_corpus,
    save_predictions,
    synthesize,
    _csv_text,
)
from detkit.evaluation import match, mean_average_precision, pr_curve, precision_recall_f1
from detkit.optimizer import DEParams, anchor_bounds, load_de_params, optimize_anchors
from detkit.postprocess import hard_nms, soft_nms

log = logging.getLogger("detkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _resolve_threads(n: int) -> int:
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _require_file(path) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"input file not found: {path}")


# --- subcommands ---------------------------------------------------------------
# Each returns (list of written output paths, dict of input paths).


def cmd_synthesize(args):
    spec = SyntheticSpec(
        num_images=args.images,
        image_width_range=(args.image_width, args.image_width),
        image_height_range=(args.image_height, args.image_height),
        boxes_per_image=(args.boxes_min, args.boxes_max),
        size_range=(args.size_min, args.size_max),
        ratios=tuple(args.ratios),
        ratio_weights=tuple(args.weights) if args.weights else tuple(1 / len(args.ratios) for _ in args.ratios),
        seed=args.seed,
    )
    corpus = synthesize(spec)
    out = Path(args.out) if args.out else args.out_dir / "synth.json"
    save_corpus(corpus, out)
    meta = out.with_name(out.stem + ".meta.json")
    atomic_write(meta, _dump(corpus.metadata))
    print(f"wrote {len(corpus.images)} images, {len(corpus.ground_truths)} boxes to {out}")
    return [out, meta], {}


def cmd_coverage(args):
    _require_gt_and_config(args)
    cfg = load_config(args.config)
    corpus = load_corpus(args.gt)
    if not corpus.ground_truths:
        raise ValueError(f"{args.gt}: corpus has no ground-truth boxes")
    report = coverage(cfg, corpus.ground_truths, full_grid=args.full_grid,
                      image_size=tuple(args.image_size), threads=_resolve_threads(args.threads))
    out = Path(args.out) if args.out else args.out_dir / "coverage.json"
    payload = {"config": str(args.config), "anchors_per_location": cfg.anchors_per_location, **report.to_dict()}
    atomic_write(out, _dump(payload))
    print(
        f"config={args.config} anchors/location={cfg.anchors_per_location} "
        f"mean_best_iou={report.mean_best_iou:.6f} min_best_iou={report.min_best_iou:.6f} "
        f"frac>=0.5={report.fraction_above_half:.6f} n={report.count}"
    )
    return [out], _inputs(args.gt, args.config)


def _require_gt_and_config(args):
    _require_file(args.gt)
    if str(args.config) not in PRESETS:
        _require_file(args.config)


def _inputs(*paths):
    return {str(p): p for p in paths if str(p) not in PRESETS}


def cmd_optimize(args):
    _require_gt_and_config(args)
    base = load_config(args.config)
    corpus = load_corpus(args.gt)
    symmetric = not args.free_ratios
    bounds = anchor_bounds(base, 2 if symmetric else 5)
    inputs = _inputs(args.gt, args.config)
    if args.de:
        _require_file(args.de)
        params = load_de_params(args.de, bounds)
        inputs[str(args.de)] = args.de
    else:
        params = DEParams(bounds=bounds)
    if args.seed_given:
        params = DEParams(**{**params.to_dict(), "seed": args.seed})
    cfg, result = optimize_anchors(corpus.ground_truths, base, params, symmetric=symmetric,
                                   threads=_resolve_threads(args.threads))
    out = Path(args.out) if args.out else args.out_dir / "optimized.json"
    trace = out.with_name(out.stem + ".trace.csv")
    atomic_write(out, config_to_json(cfg))
    atomic_write(trace, _csv_text(["generation", "best_objective"], [[i, repr(v)] for i, v in enumerate(result.history)]))
    sizes = " ".join(f"{lv.base_size:.3f}" for lv in cfg.levels)
    ratios = " ".join(f"{r:.3f}" for r in cfg.ratios)
    print(f"best mean_best_iou={result.best_objective:.6f} after {result.generations} generations "
          f"({result.evaluations} evaluations)")
    print(f"sizes ({sizes}) ratios ({ratios})")
    return [out, trace], inputs


def cmd_nms(args):
    _require_file(args.pred)
    dets = load_predictions(args.pred)
    if args.method == "hard":
        kept = hard_nms(dets, args.iou if args.iou is not None else 0.5)
    else:
        kept = soft_nms(dets, args.method, args.iou if args.iou is not None else 0.3, args.sigma, args.score_floor)
    out = Path(args.out) if args.out else args.out_dir / "nms.csv"
    save_predictions(kept, out)
    print(f"{len(dets)} detections in, {len(kept)} out ({args.method})")
    return [out], _inputs(args.pred)


def cmd_evaluate(args):
    _require_file(args.gt)
    _require_file(args.pred)
    corpus = load_corpus(args.gt)
    dets = load_predictions(args.pred)
    if not corpus.ground_truths:
        raise ValueError(f"{args.gt}: AP is undefined for a corpus without ground truth")
    m = match(dets, corpus.ground_truths, args.iou)
    prf = precision_recall_f1(m)
    curve = pr_curve(m)
    mean_ap, per_label = mean_average_precision(dets, corpus.ground_truths, args.iou)
    report = {
        "iou_threshold": args.iou,
        "tp": m.true_positives,
        "fp": m.false_positives,
        "fn": m.false_negatives,
        "frame_fn": m.frame_fn,
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
        "ap": curve.ap,
        "map": mean_ap,
        "ap_per_label": {str(k): v for k, v in per_label.items()},
    }
    out_dir = args.out_dir
    metrics = out_dir / "metrics.json"
    text = out_dir / "metrics.txt"
    curve_csv = out_dir / "pr_curve.csv"
    line = (f"prec={round(prf.precision, 6)} rec={round(prf.recall, 6)} f1={round(prf.f1, 6)} "
            f"ap={round(curve.ap, 6)} map={round(mean_ap, 6)} tp={m.true_positives} fp={m.false_positives} "
            f"fn={m.false_negatives} frame_fn={m.frame_fn}")
    atomic_write(metrics, _dump(report))
    atomic_write(text, line + "\n")
    atomic_write(curve_csv, _csv_text(["threshold", "recall", "precision"],
                                      [[repr(t), repr(r), repr(p)] for t, r, p in curve.rows()]))
    print(line)
    return [metrics, text, curve_csv], _inputs(args.gt, args.pred)


def cmd_kernel_check(args):
    results = run_kernel_checks(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}" + (f"  ({r.detail})" if r.detail else ""))
    out = args.out_dir / "kernel_check.json"
    atomic_write(out, _dump([{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]))
    args.failed = not all(r.passed for r in results)
    return [out], {}


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs and manifest")

    parser = _Parser(prog="detkit", description="Anchor optimization, NMS and detection metrics.")
    parser.add_argument("--version", action="version", version=f"detkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synthesize", parents=[common], help="generate a synthetic ground-truth corpus")
    p.add_argument("--out", help="corpus path (.json for COCO, .csv for CSV)")
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--image-width", type=float, default=300)
    p.add_argument("--image-height", type=float, default=300)
    p.add_argument("--boxes-min", type=int, default=1)
    p.add_argument("--boxes-max", type=int, default=3)
    p.add_argument("--size-min", type=float, default=8)
    p.add_argument("--size-max", type=float, default=96)
    p.add_argument("--ratios", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    p.add_argument("--weights", type=float, nargs="+")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("coverage-report", parents=[common], help="score a config against a corpus")
    p.add_argument("--config", required=True, help=f"config JSON or preset ({', '.join(PRESETS)})")
    p.add_argument("--gt", required=True)
    p.add_argument("--full-grid", action="store_true", help="best IoU over tiled anchors instead of centered shapes")
    p.add_argument("--image-size", type=float, nargs=2, default=[300, 300], metavar=("W", "H"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("optimize-anchors", parents=[common], help="differential-evolution anchor search")
    p.add_argument("--gt", required=True)
    p.add_argument("--config", required=True, help="base config JSON or preset")
    p.add_argument("--de", help="JSON with DE settings")
    p.add_argument("--out")
    p.add_argument("--free-ratios", action="store_true", help="optimize 5 independent ratios")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("nms", parents=[common], help="hard or soft NMS over a predictions CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--method", choices=["hard", "linear", "gaussian"], default="gaussian")
    p.add_argument("--iou", type=float, default=None, help="overlap threshold (0.5 hard, 0.3 soft)")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--score-floor", type=float, default=0.001)
    p.add_argument("--out")
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("evaluate", parents=[common], help="precision, recall, F1 and AP")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("kernel-check", parents=[common], help="run the numerical kernel oracle suite")
    p.set_defaults(func=cmd_kernel_check)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "detkit: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    args.failed = False

    start = time.perf_counter()
    try:
        outputs, inputs = args.func(args)
    except (FormatError, ValueError, OSError) as exc:
        print(f"detkit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"detkit {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 2

    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func", "seed_given", "failed")}
    manifest = {
        "subcommand": args.command,
        "parameters": params,
        "inputs": {name: _digest(p) for name, p in sorted(inputs.items())},
        "outputs": [str(p) for p in outputs],
        "seed": args.seed,
        "version": __version__,
        "duration_seconds": round(time.perf_counter() - start, 6),
    }
    where = Path(outputs[0]).parent if outputs else args.out_dir
    atomic_write(where / f"{args.command}.manifest.json", _dump(manifest))
    return 1 if args.failed else 0


def main() -> None:
    sys.exit(run())
