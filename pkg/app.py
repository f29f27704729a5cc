"""Command-line entry point: aeriscast <command> --config <path> [--set key=value ...]"""
import argparse
import json
import logging
import sys
from typing import List, Optional

import config
from core.errors import (
    AeriscastError,
    AlignmentError,
    BoundsError,
    ConfigError,
    DegenerateChannelError,
    InvalidArgumentError,
    MissingInitError,
    NumericFailureError,
    PersistenceError,
)
from features.pipeline import Pipeline, load_run_config

logger = logging.getLogger("aeriscast")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

COMMANDS = [
    "generate-data", "compute-stats", "train", "finetune",
    "rollout", "evaluate", "report", "ablate", "gradcheck",
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aeriscast",
        description="Train and verify shifted-window attention forecast models on gridded fields",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="RunConfig JSON file (defaults apply when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set train.epochs=2 (repeatable)")
    parser.add_argument("--output-dir", help="root for stage directories (overrides output_dir)")
    parser.add_argument("--steps", type=int, help="finetune: number of unrolled steps (4 or 8)")
    parser.add_argument("--inits", type=int, help="rollout/evaluate: number of evenly spaced init times")
    parser.add_argument("--lead-days", type=float, help="rollout/evaluate: forecast length in days")
    parser.add_argument("--source", default="train",
                        help="rollout/evaluate: 'train' or 'finetune<n>' (default: train)")
    return parser


def exit_code(error: BaseException) -> int:
    if isinstance(error, PersistenceError):
        return EXIT_IO
    if isinstance(error, (NumericFailureError, DegenerateChannelError)):
        return EXIT_NUMERIC
    if isinstance(error, (ConfigError, InvalidArgumentError, BoundsError, AlignmentError, MissingInitError)):
        return EXIT_CONFIG
    return 1


def run_command(args: argparse.Namespace) -> int:
    overrides = list(args.overrides)
    if args.inits is not None:
        overrides.append(f"eval.n_inits={args.inits}")
    if args.lead_days is not None:
        overrides.append(f"eval.lead_days={args.lead_days}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    cfg = load_run_config(args.config, overrides)
    pipeline = Pipeline(cfg)
    logger.info("%s: run %s (hash %s) under %s", args.command, cfg.name, pipeline.run_hash, pipeline.root)

    if args.command == "generate-data":
        pipeline.generate_data()
    elif args.command == "compute-stats":
        pipeline.compute_stats()
    elif args.command == "train":
        pipeline.train()
    elif args.command == "finetune":
        if args.steps is None:
            raise ConfigError("--steps", "finetune needs --steps")
        pipeline.finetune(args.steps)
    elif args.command == "rollout":
        pipeline.rollout(args.source)
    elif args.command == "evaluate":
        pipeline.evaluate(args.source)
    elif args.command == "report":
        pipeline.report()
    elif args.command == "ablate":
        pipeline.ablate()
    elif args.command == "gradcheck":
        reports = {k: v for k, v in pipeline.gradcheck().items() if k != "format_version"}
        for name, report in reports.items():
            logger.info("gradcheck %s: max relative error %.3g (tolerance %.0e) %s",
                        name, report["max_rel_error"], report["tolerance"],
                        "passed" if report["passed"] else "FAILED")
        if not all(report["passed"] for report in reports.values()):
            return EXIT_NUMERIC
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config.configure_logging()
    config.configure_threads()
    try:
        return run_command(args)
    except AeriscastError as e:
        logger.error("%s failed: %s", args.command, e)
        return exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
