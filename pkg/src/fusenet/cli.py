"""Command line: ``fusenet {validate,run,eval,plot}``.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
import argparse
import logging
import os
import sys

from .config import ConfigError, validate_config


def _seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusenet", description="Multi-stream CNN fusion experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("validate", "check a config file, including a shape dry-run"),
                        ("run", "run the full experiment matrix"),
                        ("eval", "re-evaluate a finished run from its checkpoints"),
                        ("plot", "re-emit the CMC SVG from a metrics CSV")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=name != "plot")
        sp.add_argument("--out", default=".")
        sp.add_argument("--seed-override", type=_seeds, default=None,
                        help="comma-separated seeds replacing experiment.seeds")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "plot":
            sp.add_argument("--metrics", default="metrics.csv", help="metrics CSV, relative to --out")
            sp.add_argument("--svg", default="cmc.svg", help="output SVG, relative to --out")
            sp.add_argument("--run-id", default="mean")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command != "plot":
        errors = validate_config(args.config)
        if errors:
            for e in errors:
                print(f"error: {e}", file=sys.stderr)
            return 1
        if args.command == "validate":
            print(f"{args.config}: ok")
            return 0
    from .experiment import evaluate_checkpoints, plot_from_csv, run_experiment

    try:
        if args.command == "run":
            summary = run_experiment(args.config, args.out, args.seed_override)
        elif args.command == "eval":
            summary = evaluate_checkpoints(args.config, args.out, args.seed_override)
        else:
            plot_from_csv(os.path.join(args.out, args.metrics), os.path.join(args.out, args.svg), args.run_id)
            return 0
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as exc:  # reported, marker already written by the runner
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for name, (mean, std) in summary.items():
        print(f"{name:<28}{mean:8.2f} +- {std:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
