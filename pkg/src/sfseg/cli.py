"""Command line entry point: ``sfseg [global flags] <stage>``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ExperimentConfig
from .errors import ConfigError, DependencyError, LockError, ShapeError
from .pipeline import STAGES, planned_stages, run_stages

EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_LOCKED = 2, 3, 4


def _global_flags(p, defaults=True):
    d = None if defaults else argparse.SUPPRESS
    p.add_argument("--config", default=d, help="experiment config JSON (defaults built in)")
    p.add_argument("--seed", type=int, default=d, help="override config seed")
    p.add_argument("--output-dir", default=d, help="run directory (overrides config output_dir)")
    p.add_argument("--resume", action="store_true", default=False if defaults else argparse.SUPPRESS,
                   help="skip stages already completed under the same config hash")
    p.add_argument("-v", "--verbose", action="store_true", default=False if defaults else argparse.SUPPRESS)


def _adapt_flags(p):
    p.add_argument("--rounds", type=int)
    p.add_argument("--retain-fraction", type=float)
    p.add_argument("--lambda-ent", type=float)
    p.add_argument("--cpae", dest="use_cpae", action=argparse.BooleanOptionalAction, default=None,
                   help="also adapt LO++ on cPAE-refined pseudo-labels (the main variant)")
    p.add_argument("--infer-cpae", action=argparse.BooleanOptionalAction, default=None,
                   help="also report test-time inference through the cPAE")
    p.add_argument("--class-weighting", choices=("source", "uniform"),
                   help="class weights of the self-training cross-entropy")


def build_parser():
    parser = argparse.ArgumentParser(prog="sfseg", description="Source-free segmentation adaptation on ToyScapes.")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "render source/target datasets",
        "select-ags": "train the single-source baseline and admit augmentation groups",
        "vendor-train": "train vendor models for every configured routing",
        "cpae-train": "train the denoising prior on the leave-one-out model",
        "adapt": "source-free adaptation of every vendor model to the target",
        "adapt-online": "re-adapt the main adapted model to a second target",
        "evaluate": "score vendor and adapted models on the target test sets",
        "report": "tables, CSV and plots from a finished run",
        "all": "run every stage in order",
    }
    for name in list(STAGES) + ["all"]:
        p = sub.add_parser(name, help=helps[name])
        _global_flags(p, defaults=False)
        if name in ("adapt", "adapt-online", "evaluate", "all"):
            _adapt_flags(p)
    return parser


def resolve_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir:
        cfg.output_dir = args.output_dir
    a = cfg.adaptation
    for flag, attr in (("rounds", "rounds"), ("retain_fraction", "retain_fraction"), ("lambda_ent", "lambda_ent"),
                       ("use_cpae", "use_cpae"), ("infer_cpae", "infer_cpae"),
                       ("class_weighting", "class_weighting")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(a, attr, v)
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        stages = planned_stages(cfg) if args.command == "all" else [args.command]
        manifest = run_stages(cfg, stages, cfg.output_dir, args.resume)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as e:
        print(f"shape error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except LockError as e:
        print(f"locked: {e}", file=sys.stderr)
        return EXIT_LOCKED
    for s in stages:
        rec = manifest["stages"].get(s, {})
        print(f"{s:<13} {rec.get('wall_time_s', 0):8.1f}s  -> {cfg.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
