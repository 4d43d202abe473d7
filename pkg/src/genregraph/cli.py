"""Command-line entry point. Exit codes: 0 success, 1 usage or config error, 2 runtime failure."""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import DEFAULT_INI, STAGES, ConfigError, load_config, run_pipeline

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="genregraph", description="Siamese embeddings + graph network genre classifier.")
    p.add_argument("stage", choices=[*STAGES, "all", "default-config"],
                   help="pipeline stage to run; default-config prints a starter INI")
    p.add_argument("--config", metavar="PATH", help="INI file; flags override its keys")
    p.add_argument("--seed", type=int, help="overrides [run] seed")
    p.add_argument("--out", metavar="DIR", help="overrides [run] out")
    p.add_argument("--labeled-fraction", type=float, action="append", metavar="F",
                   help="overrides [split] labeled_fractions; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.stage == "default-config":
        sys.stdout.write(DEFAULT_INI)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out, args.labeled_fraction)
    except ConfigError as err:
        print(f"genregraph: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = run_pipeline(cfg, args.stage)
    except Exception as err:  # every failure past config parsing is a runtime error
        logging.getLogger("genregraph").debug("failure", exc_info=True)
        print(f"genregraph: {args.stage} failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    if report is not None:
        sys.stdout.write(report.to_table())
    return 0


if __name__ == "__main__":
    sys.exit(main())
