"""Command-line entry point: ``rxdpm {solve,order,compare,hybrid} --config cfg.json``.

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, InvalidArgument, NumericalFailure, PreconditionViolation
from .harness import COMMANDS, RunAborted, load_config, report_to_csv, report_to_json

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_parser():
    parser = argparse.ArgumentParser(prog="rxdpm", description="Extrapolated ODE sampling experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment JSON file")
    parser.add_argument("--out", help="output path (stdout if omitted)")
    parser.add_argument("--format", choices=["json", "csv"], default="json")
    parser.add_argument("--seed", type=int, help="override the config seed (u64)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _emit(report, args):
    text = report_to_csv(report) if args.format == "csv" else report_to_json(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("seed must be an unsigned 64-bit integer", "--seed")
            cfg.seed = args.seed
        report = COMMANDS[args.command](cfg)
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAborted as exc:
        _emit(exc.report, args)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgument, PreconditionViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit(report, args)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
