"""Command-line driver: ``actproj {pretrain,calibrate,train,reduce,evaluate,report,all}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ExperimentConfig
from .numerics import ConvergenceError, ShapeError, ValidationError
from .refnet import StateError, TrainingDiagnostic
from .training import NumericalFailure

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_UNMET_BUDGET = 3

COMMANDS = ("pretrain", "calibrate", "train", "reduce", "evaluate", "report", "all")


def build_parser():
    parser = argparse.ArgumentParser(prog="actproj", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--policy", choices=("threshold", "greedy", "both"))
    parser.add_argument("--budget-bits", type=int)
    parser.add_argument("--threshold", type=float, action="append",
                        help="eigenvalue threshold T; repeat for a sweep")
    parser.add_argument("--measured-accuracy", action="store_true",
                        help="greedy uses measured calibration accuracy drop instead of the eigenvalue proxy")
    parser.add_argument("--strict-recompute", action="store_true",
                        help="re-run the forward pass after every greedy truncation")
    parser.add_argument("--output-dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args):
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.policy:
        overrides["policy"] = args.policy
    if args.budget_bits is not None:
        overrides["budget_bits"] = args.budget_bits
    if args.threshold:
        overrides["thresholds"] = tuple(args.threshold)
    if args.measured_accuracy:
        overrides["measured_accuracy"] = True
    if args.strict_recompute:
        overrides["strict_recompute"] = True
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    return config.updated(**overrides) if overrides else config


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        if args.command == "all":
            print(pipeline.run_all(config), end="")
        elif args.command == "report":
            print(pipeline.cmd_report(config), end="")
        else:
            getattr(pipeline, f"cmd_{args.command}")(config)
        print(f"run directory: {config.run_dir()}")
    except pipeline.UnmetBudget as exc:
        print(f"unmet budget: {exc}", file=sys.stderr)
        return EXIT_UNMET_BUDGET
    except (ValidationError, ShapeError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalFailure, ConvergenceError, TrainingDiagnostic, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
