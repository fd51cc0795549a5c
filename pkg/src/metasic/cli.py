"""Command-line front end for the experiment harness.

Each subcommand runs one experiment kind. A config file is optional: when
omitted, the stock defaults are used and only the command-line overrides
apply. Outputs (results.csv, manifest.json, checkpoints) land in --out.
"""

from __future__ import annotations

import argparse
import sys

from .experiments import (EXIT_PARSE, EXIT_RUNTIME, EXIT_VALIDATION,
                          ConfigParseError, ConfigValidationError,
                          ExperimentConfig, run_config, run_experiment,
                          validate_config, write_manifest, write_results_csv)

_SUBCOMMANDS = {
    "train-meta": "train_meta",
    "train-sicnet": "train_sicnet",
    "ser-vs-pilots": "ser_vs_pilots",
    "ser-vs-snr": "ser_vs_snr",
    "ser-vs-tasks": "ser_vs_tasks",
    "complexity": "complexity",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metasic",
        description="NOMA uplink detector benchmarks: meta-learned, "
                    "from-scratch and classical interference cancellation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in _SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind} experiment")
        p.add_argument("--config", default=None,
                       help="key = value config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for sweep points")
        p.set_defaults(kind=kind)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.config is not None:
        return run_config(args.config, experiment=args.kind, seed=args.seed,
                          out_dir=args.out, threads=args.threads)
    cfg = ExperimentConfig(experiment=args.kind)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    try:
        validate_config(cfg)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigValidationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        from pathlib import Path

        rows, extras, timings = run_experiment(cfg)
        out = Path(cfg.out_dir)
        write_results_csv(out / "results.csv", rows)
        write_manifest(out / "manifest.json", cfg, extras, timings)
    except Exception as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
