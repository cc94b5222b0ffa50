"""Command line: ``padlab <experiment> [--config FILE] [--seed N] [--out DIR] [--synthetic]``
and ``padlab report DIR [DIR ...] [--out DIR]``."""
from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .config import EXPERIMENTS, RunConfig, load_config, with_overrides
from .errors import ConfigError, DatasetError, DimensionError, GeometryError
from .experiments import SYNTHETIC_FLAG, run
from .report import ReportError, write_report

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_REPORT = 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="padlab", description="Border-handling and position-information experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="key = value config file with [section] headers")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="run directory (default: <[run] out>/<experiment>-s<seed>)")
        p.add_argument(SYNTHETIC_FLAG, action="store_true", help="use generated patches instead of CIFAR-10")
    rp = sub.add_parser("report", help="summarise finished run directories")
    rp.add_argument("runs", nargs="+", help="run directories")
    rp.add_argument("--out", help="directory for the summary CSV files")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    run_over = {"experiment": args.command}
    if args.seed is not None:
        run_over["seed"] = args.seed
    over = {"run": run_over}
    if args.synthetic:
        over["data"] = {"synthetic": True}
    return with_overrides(cfg, **over)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "report":
        try:
            tables = write_report(args.runs, args.out)
        except (ReportError, ConfigError) as exc:
            print(f"padlab report: {exc}", file=sys.stderr)
            return EXIT_REPORT
        for name, text in tables.items():
            print(f"# {name}")
            print(text, end="")
        return 0
    try:
        cfg = _config(args)
    except (ConfigError, TypeError) as exc:
        print(f"padlab: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = run(cfg, args.out)
    except DatasetError as exc:
        print(f"padlab: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (GeometryError, DimensionError) as exc:
        print(f"padlab: invalid geometry for this config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(out)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

