"""Command-line driver.

Every command operates on a run directory. The first command invoked on a new
directory must pass --config; the configuration is copied in and its hash keys
the manifest from then on. Commands are idempotent: re-running one whose inputs
have not changed prints "up to date" and does nothing.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, LungsoundError
from .pipeline import (
    RunConfig,
    RunDirectory,
    stage_aggregate,
    stage_embed,
    stage_evaluate,
    stage_ingest,
    stage_preprocess,
    stage_report,
    stage_stack,
    stage_synth,
    stage_train_base,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

_SIMPLE_COMMANDS = {
    "ingest": stage_ingest,
    "synth": stage_synth,
    "preprocess": stage_preprocess,
    "embed": stage_embed,
    "train-base": stage_train_base,
    "stack": stage_stack,
    "aggregate": stage_aggregate,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lungsound",
        description="Two-stage respiratory-sound classification pipeline",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--run-dir", required=True, type=Path,
                       help="run directory holding config, manifest, and artifacts")
        p.add_argument("--config", type=Path, default=None,
                       help="configuration file (required on the first command)")
        p.add_argument("--fast", action="store_true",
                       help="shortened schedules and search budgets (set at run creation)")
        p.add_argument("-v", "--verbose", action="store_true")

    for name in _SIMPLE_COMMANDS:
        add_common(sub.add_parser(name, help=f"run the {name} stage"))

    ev = sub.add_parser("evaluate", help="compute metric reports")
    add_common(ev)
    ev.add_argument("--level", choices=["event", "patient", "both"], default="both")
    ev.add_argument("--bootstrap", type=int, default=None, metavar="N",
                    help="bootstrap replicate count (overrides config)")
    ev.add_argument("--seed", type=int, default=None,
                    help="bootstrap seed (defaults to the run seed)")
    return parser


def _open_run(args) -> RunDirectory:
    config = None
    if args.config is not None:
        config = RunConfig.from_file(args.config)
        if args.fast:
            config = RunConfig(dict(config.values, fast=True))
    run = RunDirectory(args.run_dir, config)
    if args.fast and not run.config["fast"]:
        raise ConfigError(
            "this run directory was created without fast mode; --fast cannot be "
            "toggled afterwards (start a new run directory)"
        )
    return run


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        run = _open_run(args)
        if args.command == "evaluate":
            stage_evaluate(run, level=args.level, n_bootstrap=args.bootstrap,
                           bootstrap_seed=args.seed)
        else:
            _SIMPLE_COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LungsoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - last-resort mapping
        logging.getLogger(__name__).exception("unexpected failure")
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
