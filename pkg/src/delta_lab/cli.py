"""Command-line driver: ``delta-lab <command> [flags]``.

Option values are resolved as flags, then the ``--config`` JSON file (either
top-level keys or a section named after the command), then built-in defaults.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from delta_lab import pipeline as pl
from delta_lab.errors import DeltaLabError

log = logging.getLogger("delta_lab")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--workers", type=int, help=f"worker pool size (default: ${pl.THREADS_ENV} or CPU count)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delta-lab", description="Task arithmetic experiments on synthetic suites.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the task suite and reference set")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a previous gen-data output")
    p.add_argument("--tasks", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--samples", type=int, help="samples per task")
    p.add_argument("--separation", type=float, help="minimum distance between centers")
    p.add_argument("--cluster-std", type=float)
    p.add_argument("--reference-factor", type=int, help="reference size as a multiple of one task")
    p.add_argument("--hint-rate", type=float, help="probability a reference blob sample keeps its true class")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain", help="fit the base model on the reference set")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=_ints, help="hidden widths, e.g. 256,128")
    p.add_argument("--features", type=int)
    p.add_argument("--activation", choices=["tanh", "relu", "identity"])
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--head-scale", type=float)
    p.add_argument("--head-seed", type=int)

    p = sub.add_parser("curvature", help="estimate the EK-FAC curvature around the base model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--damping", type=float)
    p.add_argument("--reference", choices=["broad", "union_only", "single_task_proxy"])
    p.add_argument("--task-index", type=int, help="held-out task for single_task_proxy")
    p.add_argument("--oracle", action="store_true", default=None, help="record the gap to the exact GGN (small nets)")

    p = sub.add_parser("train", help="fine-tune one task vector per task")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--curvature")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["delta", "delta_no_teacher", "delta_no_reg", "nonlinear_ft", "linear_ft"])
    p.add_argument("--tasks", type=_names, help="comma-separated task ids or indices (default: all)")
    p.add_argument("--label", help="run name used in reports (default: the method)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--beta-t", dest="beta_T", type=float)
    p.add_argument("--beta-s", dest="beta_S", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--apkd", dest="apkd_mode", choices=["sampled", "fixed_1"])
    p.add_argument("--alpha-range", type=_floats)
    p.add_argument("--seed", type=int)
    p.add_argument("--student-ce-at-alpha", action="store_true", default=None)

    for name, helptext in (("merge", "add task vectors and evaluate"), ("negate", "subtract task vectors and evaluate")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--vectors", required=True, help="train output directory")
        p.add_argument("--out", required=True)
        p.add_argument("--alpha", type=float)
        p.add_argument("--sweep", action="store_true", default=None)
        p.add_argument("--grid", type=_floats)
        p.add_argument("--role", choices=["student", "teacher"])
        if name == "merge":
            p.add_argument("--tasks", type=_names)
        else:
            p.add_argument("--targets", type=_names)
            p.add_argument("--budget", type=float, help="allowed control-accuracy drop (fraction)")

    p = sub.add_parser("report", help="tables and CSVs comparing train runs")
    _common(p)
    p.add_argument("runs", nargs="+", help="train output directories")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap-grid", type=_floats)
    p.add_argument("--addition-grid", type=_floats)
    p.add_argument("--negation-grid", type=_floats)
    p.add_argument("--negation-budget", type=float)
    p.add_argument("--robustness-range", type=_floats)
    p.add_argument("--bins", type=int)
    return parser


_PATHS = {"config", "workers", "verbose", "command", "out", "force", "data", "checkpoint", "curvature", "vectors", "runs"}


def run(args: argparse.Namespace) -> pl.RunManifest:
    flags = {k: v for k, v in vars(args).items() if k not in _PATHS}
    cfg = pl.effective_config(args.command, pl.load_config_file(args.config), flags)
    workers = pl.resolve_workers(args.workers)
    log.info("%s with %s", args.command, json.dumps(cfg, sort_keys=True))
    if args.command == "gen-data":
        return pl.gen_data(cfg, args.out, force=args.force, workers=workers)
    if args.command == "pretrain":
        return pl.pretrain(cfg, args.data, args.out, workers)
    if args.command == "curvature":
        return pl.curvature(cfg, args.data, args.checkpoint, args.out, workers)
    if args.command == "train":
        return pl.train(cfg, args.data, args.checkpoint, args.out, args.curvature, workers)
    if args.command == "merge":
        return pl.merge(cfg, args.data, args.checkpoint, args.vectors, args.out, workers)
    if args.command == "negate":
        return pl.negate(cfg, args.data, args.checkpoint, args.vectors, args.out, workers)
    return pl.report(cfg, args.data, args.checkpoint, args.runs, args.out, workers)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        manifest = run(args)
    except DeltaLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(f"{args.command}: wrote {len(manifest.outputs)} file(s) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
