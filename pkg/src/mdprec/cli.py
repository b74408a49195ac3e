"""Command-line entry point: one subcommand per experiment mode."""

from __future__ import annotations

import argparse
import json
import sys

from .harness import MODES, load_config, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdprec",
        description="Benchmarks and training runs for the mixed-dimensional "
                    "solver and its preconditioners.")
    sub = parser.add_subparsers(dest="command", required=True)
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run a config in {mode!r} mode")
        p.add_argument("--config", required=True,
                       help="path to the experiment JSON document")
        p.add_argument("--seed", type=int, default=None,
                       help="override the graph/training seed")
        p.add_argument("--out", default=None,
                       help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, seed_override=args.seed,
                      out_override=args.out)
    if cfg.mode != args.command:
        raise SystemExit(f"config mode {cfg.mode!r} does not match "
                         f"subcommand {args.command!r}")
    result = run(cfg)
    if isinstance(result, dict) and result and hasattr(
            next(iter(result.values())), "aggregate"):
        for n, table in result.items():
            agg = table.aggregate()
            print(f"n={n}: mean iterations {agg['mean_iterations']:.2f} "
                  f"(+{agg['delta_plus']:.2f}/-{agg['delta_minus']:.2f}), "
                  f"all converged: {agg['all_converged']}")
    elif isinstance(result, dict):
        print(json.dumps(result, indent=1, default=str))
    print(f"outputs written to {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
