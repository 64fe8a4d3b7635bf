#!/usr/bin/env python3
"""Main entry point for the latgas experiments.

Usage:
    # Check detailed balance of the Metropolis family on the default grid
    poetry run latgas validate-rates

    # Diffusion matrix from a JSON experiment document
    poetry run latgas diffusion --config runs/diffusion.json --threads 4 --out out/diffusion

    # Hydrodynamic comparison with a different seed
    poetry run python -m latgas.main hydro --config runs/hydro.json --seed 7
"""

import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from latgas.config import COMMAND_CONFIGS, get_settings, load_experiment
from latgas.errors import LatgasError

logger = logging.getLogger("latgas")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latgas",
        description="Disordered lattice gas experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Rate family check (exit code 1 if any entry fails)
  latgas validate-rates --config rates.json

  # Annealed chemical potential and compressibility, reusing a cache
  LATGAS_CACHE=~/.cache/latgas latgas thermo

  # Uniform gap over box sizes
  latgas gap-scaling --config gaps.json --threads 8 --out out/gaps

Exit codes:
  0 success, 1 validation failure, 2 numerical failure, 3 resource cap
        """,
    )
    parser.add_argument("command", choices=sorted(COMMAND_CONFIGS), help="Experiment to run")
    parser.add_argument("--config", type=Path, help="JSON experiment document (defaults apply if omitted)")
    parser.add_argument("--seed", type=int, help="Seed override (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, help="Worker threads override")
    parser.add_argument("--out", type=Path, help="Output directory override")
    return parser


def main(argv: list[str] | None = None) -> int:
    """Main entry point; returns the process exit code."""
    load_dotenv(Path.cwd() / ".env")
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, get_settings().runtime.log_level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    try:
        config = load_experiment(
            args.command,
            args.config,
            seed=args.seed,
            threads=args.threads,
            out=args.out,
        )
    except (ValidationError, ValueError, OSError) as exc:
        logger.error(f"Invalid configuration for {args.command}: {exc}")
        return 1

    from latgas.experiments import run_command

    try:
        result = run_command(args.command, config)
    except LatgasError as exc:
        logger.error(f"{args.command} failed: {exc}", exc_info=True)
        return exc.exit_code
    except ValueError as exc:
        logger.error(f"{args.command} rejected its input: {exc}", exc_info=True)
        return 1

    status = "PASS" if result.passed else "FAIL"
    print(f"{args.command}: {status} - {result.message} (outputs in {config.out})")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
