"""Command line entry point: ``spdelab run <config>`` and ``spdelab list``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load
from .solver import DivergenceError, PicardError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("spdelab")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdelab", description="Run SPDE experiments from a config file.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config", help="path to an INI experiment file")
    r.add_argument("--seed", type=int)
    r.add_argument("--paths", type=int)
    r.add_argument("--out", help="output directory (overrides SPDELAB_OUT)")
    r.add_argument("--strict-reproducible", action="store_true", default=None,
                   help="use the batch-independent transform path")
    r.add_argument("--workers", type=int)
    sub.add_parser("list", help="list experiments")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .experiments import list_experiments, run

    if args.command == "list":
        print(list_experiments())
        return EXIT_OK
    try:
        cfg = load(args.config, seed=args.seed, paths=args.paths, out=args.out,
                   strict=args.strict_reproducible, workers=args.workers)
        bundle = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, PicardError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(bundle.summary())
    return EXIT_OK if bundle.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
