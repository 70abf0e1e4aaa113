"""Command line entry point: ``cdstl <subcommand> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from cdstl import pipeline
from cdstl.config import ExperimentConfig
from cdstl.errors import CdstlError
from cdstl.nncore import use_single_thread

log = logging.getLogger("cdstl")

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _jobs(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdstl", description="Prune a dataset by loss value, then distill and evaluate it.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (INI); defaults are used when omitted")
    common.add_argument("--out", default="artifacts", help="artifact directory (default: artifacts)")
    common.add_argument("--seed", type=_u64, help="root seed, overrides [run] seed")
    common.add_argument("--jobs", type=_jobs, default=1, help="worker processes for evaluation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="all stages in order")
    sub.add_parser("make-data", parents=[common], help="build and split the dataset")
    sub.add_parser("train-scorer", parents=[common], help="train the loss-ranking classifier")
    p = sub.add_parser("prune", parents=[common], help="select the loss-value core-set")
    p.add_argument("--r", type=float, help="kept fraction per class, in (0, 1]")
    p.add_argument("--mode", choices=("easy", "hard"))
    sub.add_parser("distill", parents=[common], help="distill the core-set")
    sub.add_parser("eval", parents=[common], help="cross-architecture evaluation")
    p = sub.add_parser("sweep", parents=[common], help="accuracy over a grid of pruning ratios")
    p.add_argument("--grid", choices=("coarse", "fine", "broad"))
    p = sub.add_parser("compare", help="per-architecture deltas between two evaluated runs")
    p.add_argument("a", help="artifact directory of run A")
    p.add_argument("b", help="artifact directory of run B")
    p.add_argument("--out", help="also write compare.csv here")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.update("run", seed=args.seed).validate()
    return cfg


def dispatch(args) -> None:
    if args.command == "compare":
        print(pipeline.compare_stage(args.a, args.b, args.out))
        return
    cfg = load_config(args)
    out = args.out
    if args.command == "run":
        report = pipeline.run(cfg, out, args.jobs)
        for arch, (mean, std) in report.summary().items():
            print(f"{arch}: {100 * mean:.2f} +/- {100 * std:.2f}")
    elif args.command == "make-data":
        pipeline.make_data(cfg, out)
    elif args.command == "train-scorer":
        pipeline.train_scorer_stage(cfg, out)
    elif args.command == "prune":
        core = pipeline.prune_stage(cfg, out, args.r, args.mode)
        print(f"kept {len(core.kept)} samples")
    elif args.command == "distill":
        pipeline.distill_stage(cfg, out)
    elif args.command == "eval":
        report = pipeline.eval_stage(cfg, out, args.jobs)
        for arch, (mean, std) in report.summary().items():
            print(f"{arch}: {100 * mean:.2f} +/- {100 * std:.2f}")
    elif args.command == "sweep":
        result = pipeline.sweep_stage(cfg, out, args.grid, args.jobs)
        for row in result.rows():
            print(",".join(str(v) for v in row))


def main(argv=None) -> int:
    level = os.environ.get("CDSTL_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    use_single_thread()
    try:
        dispatch(args)
    except CdstlError as exc:
        stage = getattr(exc, "stage", args.command)
        print(f"cdstl: stage {stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        stage = getattr(exc, "stage", args.command)
        print(f"cdstl: stage {stage} failed: I/O error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
