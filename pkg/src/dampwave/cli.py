"""Command-line entry point: ``dampwave <command> --config scenario.ini``."""

from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipelines
from .linearized import CertificateRefused
from .operator_core import OperatorError
from .scenario import ConfigError, load_scenario

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

COMMANDS = {
    "verify-hypotheses": pipelines.cmd_verify_hypotheses,
    "decay": pipelines.cmd_decay,
    "regularity": pipelines.cmd_regularity,
    "attractor-sweep": pipelines.cmd_attractor_sweep,
    "report": pipelines.cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dampwave", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="scenario INI file")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        scenario = load_scenario(args.config, seed=args.seed, out=args.out)
        with threadpool_limits(limits=args.threads):
            code, _ = COMMANDS[args.command](scenario)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OperatorError as exc:
        print(f"hypothesis failure [{exc.clause}]: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except CertificateRefused as exc:
        print(f"certificate refused: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
