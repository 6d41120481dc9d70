"""Command-line entry point: ``kinbrown <operation> [--config FILE] [flags]``.

Exit status is 0 when every declared check passes, 1 when one fails and 2
for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .config import OPERATIONS, ConfigError, load_config, parse_config
from .runner import run_experiment

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# params that the global flags map onto, per operation
_PATHS_KEY = {op: "paths" for op in OPERATIONS if op != "negmom"}
_T_KEY = {"ibp-check": "T", "matrix-limit": "T", "dual-limit": "T", "rates": "T",
          "coupling": "T", "tails": "t", "negmom": "t", "paths-debug": "T",
          "lln": "lam"}
_SCALAR_T = {"matrix-limit", "negmom", "paths-debug"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="kinbrown", description="Kinetic Brownian motion experiments.")
    ap.add_argument("operation", choices=OPERATIONS)
    ap.add_argument("--config", help="YAML experiment file")
    ap.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--threads", type=int, help="worker threads for replicate batches")
    ap.add_argument("--paths", type=int, help="number of replicate paths")
    ap.add_argument("--grid", type=int, help="grid resolution (see README per operation)")
    ap.add_argument("--T", type=_float_list, dest="T", help="horizon(s), comma separated")
    ap.add_argument("--check", action="store_true",
                    help="enforce the default thresholds when the config declares none")
    return ap


def merged_config(args) -> dict:
    raw = load_config(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    op = raw.get("operation", args.operation)
    if op != args.operation:
        raise ConfigError("operation", f"config declares {op!r} but "
                          f"{args.operation!r} was requested")
    raw = dict(raw, operation=op)
    params = dict(raw.get("params") or {})
    if args.paths is not None and op in _PATHS_KEY:
        params[_PATHS_KEY[op]] = args.paths
    if args.grid is not None:
        params["grid"] = args.grid
    if args.T is not None:
        key = _T_KEY[op]
        if op in _SCALAR_T:
            if len(args.T) != 1:
                raise ConfigError(f"params.{key}", "this operation takes one horizon")
            params[key] = args.T[0]
        else:
            params[key] = args.T
    raw["params"] = params
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    if args.out is not None:
        raw["output"] = args.out
    if args.check and not raw.get("checks"):
        raw["checks"] = True
    return raw


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(merged_config(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    result = run_experiment(cfg)
    for c in result.checks:
        print(c.line())
    print(f"wrote {len(result.manifest['tables'])} table(s) to {result.out_dir}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
