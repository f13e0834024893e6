"""Command-line entry point: ``saal <command> --config exp.json [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 numeric or training failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .errors import ConfigError, NumericError, ParseError, TrainingError
from .experiment import (RELATIONSHIP_METHODS, format_bench, format_sweep, load_config, render_report,
                         resolve_jobs, run_bench, run_experiment, run_relationships, run_sweep)
from .metrics import format_table

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("saal")


def _common(p: argparse.ArgumentParser, jobs: bool = True):
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. trainer.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int, action="append", dest="seeds",
                   help="run only these seeds (repeatable); replaces the config's seed list")
    p.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    if jobs:
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel jobs (default: $SAAL_JOBS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saal", description="Self-auxiliary multi-task experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("run", help="train a strategy per seed and report relative improvements"))

    rel = sub.add_parser("relationships", help="estimate a directed task-relationship matrix")
    _common(rel)
    rel.add_argument("--method", choices=RELATIONSHIP_METHODS, required=True)

    _common(sub.add_parser("bench", help="batch runtime of each strategy relative to equal"), jobs=False)
    _common(sub.add_parser("sweep-shared-depth", help="equal vs saal_e at every shared depth"))

    rep = sub.add_parser("report", help="re-render JSON outputs as text tables")
    rep.add_argument("paths", nargs="+", type=Path)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seeds:
        overrides.append("seeds=" + str(list(args.seeds)))
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            for path in args.paths:
                print(render_report(path))
            return EXIT_OK
        cfg = _config(args)
        if args.command == "run":
            mean = run_experiment(cfg, args.out, resolve_jobs(args.jobs))
            print(format_table({cfg.strategy: mean}))
        elif args.command == "relationships":
            result = run_relationships(cfg, args.method, args.out, resolve_jobs(args.jobs))
            print(result["heatmap"])
            for key, corr in result["correlations"].items():
                mean = corr.get("mean")
                print(f"spearman {key}: " + (corr["error"] if "error" in corr else
                                             "n/a" if mean is None else f"{mean:+.3f}"))
        elif args.command == "bench":
            print(format_bench(run_bench(cfg, args.out)))
        elif args.command == "sweep-shared-depth":
            print(format_sweep(run_sweep(cfg, args.out, resolve_jobs(args.jobs))))
    except (ConfigError, ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NumericError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
