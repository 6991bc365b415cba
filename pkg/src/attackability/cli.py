"""Command-line entry point; subcommands mirror pipeline stages."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, ProvenanceError
from .pipeline import STAGES, Pipeline, StageFailure

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
COMMANDS = tuple(s for s in STAGES if s != "data") + ("run",)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attackability", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help="run the full pipeline" if name == "run" else f"run up to and including {name}")
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config leaf, e.g. --set victim_train.epochs=5")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        pipe = Pipeline(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    until = "report" if args.command == "run" else args.command
    try:
        status = pipe.run(until)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"stage {exc.stage} failed: {exc.cause!r}", file=sys.stderr)
        return EXIT_STAGE
    except ProvenanceError as exc:
        print(f"stage {until} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    for stage, state in status.items():
        print(f"{stage}: {state}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
