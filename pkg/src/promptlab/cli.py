"""Command line: ``promptlab {train,sweep,account,forgetting} --config PATH --out DIR``.

Errors are reported as a single ``error: <kind>: <message>`` line on stderr.
Exit codes: 0 success, 2 bad config or arguments, 1 run failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import MODES, ConfigError, ExperimentConfig, execute


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promptlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", type=Path, required=mode != "account",
                       help="experiment JSON")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--quiet", action="store_true", help="log warnings only")
    return parser


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if cfg.mode != args.command:
            cfg.mode = args.command
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(f"--seed: must be non-negative, got {args.seed}")
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return 2
    try:
        out = execute(cfg, args.out)
    except KeyboardInterrupt:
        print("error: interrupted: partial run left in place", file=sys.stderr)
        return 130
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(out / "results.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
