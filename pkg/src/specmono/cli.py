"""``specmono`` command line: sieve | synth | detect | monodromy | run-all."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .pipeline import EXIT_CONFIG, EXIT_IO, EXIT_OK, RUN_ALL, run_stages

VERBS = {"sieve": ("sieve",), "synth": ("synth",), "detect": ("detect",),
         "monodromy": ("monodromy",), "run-all": RUN_ALL}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specmono", description=__doc__)
    parser.add_argument("verb", choices=sorted(VERBS))
    parser.add_argument("--config", type=Path, help="INI run configuration (defaults when omitted)")
    parser.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
    parser.add_argument("--seed", type=int, help="noise seed (overrides [run] seed)")
    parser.add_argument("--workers", type=int, help="worker processes for synthesis")
    parser.add_argument("--blind", action="store_true", help="strip ground-truth columns from spectra")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            print("config error: --workers must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        run["workers"] = args.workers
    if args.blind:
        run["blind"] = True
    if args.out is not None:
        run["out"] = str(args.out)
    if run:
        cfg = cfg.with_overrides(run=run)
    code, results, failure = run_stages(cfg, Path(cfg.run.out), VERBS[args.verb])
    for r in results:
        print(f"{r.name}: {json.dumps(r.summary, sort_keys=True)}")
        for w in r.warnings:
            print(f"  warning: {w}", file=sys.stderr)
    if failure:
        print(f"{failure['stage']} failed ({failure['error']}): {failure['message']}", file=sys.stderr)
    return code if failure else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
