"""Command-line entry point: ``fedapa --config run.cfg [--seed N] [--mode M] [--out DIR]``.

Exit status is 0 on success, 2 for a bad config, 3 for a failure while running.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .runner import (
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_config,
    print_summary,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedapa", description="Run one federated experiment.")
    p.add_argument("--config", help="key = value config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--mode", help="override the config mode")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--rounds", type=int, help="override the number of rounds")
    p.add_argument("--workers", type=int, help="threads for client updates")
    p.add_argument("--summary", nargs="+", metavar="DIR", help="print the table for existing runs and exit")
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.mode is not None:
        # Reuse the file parser so "fedapa_static_lambda(0.5)" works here too.
        parsed = parse_config(f"mode = {args.mode}")
        cfg = replace(cfg, mode=parsed.mode, static_lambda=parsed.static_lambda)
    overrides = {"seed": args.seed, "out_dir": args.out, "rounds": args.rounds, "workers": args.workers}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.summary:
        try:
            print_summary(args.summary, file=sys.stdout)
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = run_experiment(cfg)
    except Exception as e:  # report any failure as a runtime error
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print_summary([res.out_dir], file=sys.stdout)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
