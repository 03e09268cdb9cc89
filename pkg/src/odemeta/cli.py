"""Command-line entry point.

    odemeta <train|evaluate|optimize|report> --config cfg.json [--seed N] [--out DIR]

The config file is a single JSON document (see :mod:`odemeta.bench` for the
schema).  ``--seed`` replaces the config's seed list with one seed and
``--out`` replaces the output directory; the environment variables
``ODEMETA_SEED`` and ``ODEMETA_OUT`` act as defaults for those two flags and
nothing else.  Outputs land under ``<out>/<config-hash>/``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import bench
from .errors import OdemetaError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odemeta",
                                     description="ODE meta-model benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="mode", required=True)
    for verb, doc in (("train", "meta-train models and save checkpoints"),
                      ("evaluate", "MSE/NLL versus context trajectories"),
                      ("optimize", "delay-constrained BO hypervolume benchmark"),
                      ("report", "re-emit plot-ready curves from histories")):
        p = sub.add_parser(verb, help=doc)
        p.add_argument("--config", required=True, help="path to JSON config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = bench.load_config(args.config)
        config.mode = args.mode
        seed = args.seed if args.seed is not None else os.environ.get("ODEMETA_SEED")
        if seed is not None:
            config.seeds = [int(seed)]
        out = args.out if args.out is not None else os.environ.get("ODEMETA_OUT")
        if out is not None:
            config.out_dir = out
        bench.run(config)
    except OdemetaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(config.run_dir())
    return 0


if __name__ == "__main__":
    sys.exit(main())
