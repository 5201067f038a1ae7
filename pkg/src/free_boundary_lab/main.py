"""
File: main.py
Description: Command-line entry point: parses the subcommand and flags, sets up logging
    and the worker count, and hands over to the runner.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

import argparse
import sys
from typing import Optional, Sequence

from loguru import logger

from free_boundary_lab.core.exceptions import ConfigError
from free_boundary_lab.interfaces.cli import EXIT_CONFIG, SUBCOMMANDS, run
from free_boundary_lab.utils.helpers import configure_logging, resolve_workers
from free_boundary_lab.utils.paths import APP_CONFIG_FPATH


def build_parser() -> argparse.ArgumentParser:
    """Argument parser shared by ``main`` and the tests."""
    parser = argparse.ArgumentParser(
        prog="fbl", description="Free-boundary lab: solve, estimate and verify optimal stopping boundaries"
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="Pipeline stage(s) to run")
    parser.add_argument("--config", default=APP_CONFIG_FPATH, help="YAML run configuration")
    parser.add_argument("--out", default=None, help="Output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, default=None, help="Root seed (overrides mc.seed)")
    parser.add_argument("--workers", type=int, default=None, help="Worker threads (fallback: FBL_WORKERS)")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Handles all high-level project operations."""
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet)
    try:
        workers = resolve_workers(args.workers)
    except ConfigError as e:
        logger.error("Configuration error: {}", e)
        return EXIT_CONFIG
    return run(args.subcommand, args.config, out=args.out, seed=args.seed, workers=workers)


if __name__ == "__main__":
    sys.exit(main())
