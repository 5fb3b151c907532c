"""Command line: ``tcglab <command> [--param key=value]... [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import COMMANDS, ExperimentSpec, run_experiment
from .tr import _jsonable


def _parse_param(text: str):
    key, eq, val = text.partition("=")
    if not eq or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), val.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcglab",
        description="Trust-region tCG experiments and Lanczos polynomial checks.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--param", action="append", type=_parse_param, default=[],
                        metavar="KEY=VALUE", help="experiment parameter (repeatable)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    params = {}
    for key, val in args.param:
        if key in params:
            print(f"tcglab: parameter {key!r} given twice", file=sys.stderr)
            return 2
        params[key] = val
    spec = ExperimentSpec(args.command, params, args.seed, args.out)
    try:
        summary, ok = run_experiment(spec)
    except ValueError as exc:
        print(f"tcglab {args.command}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
