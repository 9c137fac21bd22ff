import argparse
import sys

from attlist.commands import ablate, evaluate, export_attention, prepare, synthesize, train
from attlist.config import settings
from attlist.errors import AttListError, handle_cli_error
from attlist.logging import setup_logging

COMMANDS = (prepare, synthesize, train, evaluate, ablate, export_attention)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.app_name,
        description="Train and evaluate the AttList list recommender",
        allow_abbrev=False,
    )
    parser.add_argument(
        "--log-level", default=settings.log_level,
        help=f"logging level (default: {settings.log_level})",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # hook up every subcommand
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.run(args)
    except AttListError as e:
        return handle_cli_error(e)


if __name__ == "__main__":
    sys.exit(main())
