"""gallat command-line entry point."""

import argparse
import asyncio
import logging
import os
import sys
from typing import List, NoReturn, Optional

from pydantic import ValidationError
from rich.console import Console

from gallat import __version__
from gallat.commands import (
    EvaluateCommand,
    IngestCommand,
    ParamsCommand,
    PredictCommand,
    SynthCommand,
    TrainCommand,
)
from gallat.errors import ConfigError, GallatError
from gallat.interfaces.command import Command
from gallat.services.command_service import CommandService

LOG_LEVEL_ENV = "GALLAT_LOG_LEVEL"
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3

logger = logging.getLogger(__name__)


def get_available_commands() -> List[Command]:
    """Get list of all available commands."""
    return [
        IngestCommand(),
        SynthCommand(),
        TrainCommand(),
        PredictCommand(),
        EvaluateCommand(),
        ParamsCommand(),
    ]


def error_line(kind: str, code: int, message: str) -> str:
    """Single-line, machine-parseable failure report."""
    flat = " ".join(str(message).split()).replace('"', "'")
    return f'error={kind} exit={code} message="{flat}"'


def fail(kind: str, code: int, message: str) -> NoReturn:
    print(error_line(kind, code, message), file=sys.stderr)
    sys.exit(code)


class GallatArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors follow the single-line error format."""

    def error(self, message: str) -> NoReturn:
        fail("usage", EXIT_USAGE, f"{self.prog}: {message}")


def setup_logging() -> None:
    level = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(
        format=f"%(asctime)s [%(levelname)s] [v{__version__}] %(message)s",
        level=getattr(logging, level, logging.INFO),
        stream=sys.stderr,
    )


def build_parser(service: CommandService) -> argparse.ArgumentParser:
    parser = GallatArgumentParser(prog="gallat", description="Gallat spatiotemporal OD demand forecasting")
    parser.add_argument("--version", action="version", version=f"gallat {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True
    service.register_cli_parsers(subparsers)
    return parser


def run(argv: Optional[List[str]] = None, console: Optional[Console] = None) -> int:
    """Parse ``argv``, run one command and return its exit status."""
    service = CommandService()
    service.register_commands(get_available_commands())
    args = vars(build_parser(service).parse_args(argv))
    name = args.pop("command")
    try:
        response = asyncio.run(service.execute_command(name, args))
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or name
        fail("usage", EXIT_USAGE, f"{name}: {where}: {first['msg']}")
    except FileNotFoundError as e:
        fail("missing_input", EXIT_MISSING_INPUT, str(e))
    except ConfigError as e:
        fail(e.kind, EXIT_USAGE, str(e))
    except GallatError as e:
        fail(e.kind, e.exit_code, str(e))
    except Exception as e:
        logger.exception(f"[gallat] {name} failed")
        fail("unexpected", EXIT_UNEXPECTED, f"{type(e).__name__}: {e}")
    service.get_command(name).render(response, console or Console())
    return EXIT_OK


def main():
    """Entry point for the CLI."""
    setup_logging()
    logging.debug(f"[gallat] starting, version {__version__}")
    sys.exit(run())


if __name__ == "__main__":
    main()
