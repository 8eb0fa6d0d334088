"""Command line entry point: ``bdglab run | list-catalog | version``."""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .errors import ConfigurationError
from .report import ExperimentConfig, check_output_dir, list_catalog, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdglab",
                                     description="BDG inequalities at random times, by simulation.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiments of a JSON config")
    p_run.add_argument("--config", required=True, help="path to the JSON config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--n-paths", type=int, default=None, help="override the path count")
    p_run.add_argument("--out", default=None, help="override the output directory")
    sub.add_parser("list-catalog", help="list catalog identifiers")
    sub.add_parser("version", help="print the package version")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "version":
        print(__version__)
        return 0
    if args.command == "list-catalog":
        sys.stdout.write(list_catalog())
        return 0
    try:
        config = ExperimentConfig.from_file(args.config).with_overrides(
            args.seed, args.n_paths, args.out)
    except ConfigurationError as exc:
        print(f"bdglab: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        check_output_dir(config.output_dir)
    except OSError as exc:
        print(f"bdglab: cannot write to {config.output_dir}: {exc}", file=sys.stderr)
        return 3
    try:
        report = run(config)
    except ConfigurationError as exc:
        print(f"bdglab: configuration error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {config.output_dir}/report.json "
          f"({len(report['experiments'])} result blocks, {report['wall_clock_seconds']} s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
