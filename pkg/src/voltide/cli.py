"""``voltide <command> --config <path> [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import load_config
from .errors import VoltideError
from .pipeline import COMMANDS

logger = logging.getLogger("voltide")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltide",
                                     description="Stablecoin-to-crypto volatility transmission pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="output directory (env VOLTIDE_OUT)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = args.out or os.environ.get("VOLTIDE_OUT")
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=out)
        COMMANDS[args.command](cfg)
    except VoltideError as exc:
        print(f"voltide {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
