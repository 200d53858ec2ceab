import logging
import sys
from typing import Optional, Sequence

from commands.registry import CommandRegistry
from core.errors import UsageError
from core.log import get_logger, setup_logging

logger = get_logger(__name__)

_FRONT_END_ARGS = {"command", "verbose", "config_file"}


def run_cli(argv: Optional[Sequence[str]] = None, registry: Optional[CommandRegistry] = None) -> int:
    """Parses ``argv``, runs one command and returns its exit code; reports go to stdout, diagnostics to stderr."""
    setup_logging()
    registry = registry or CommandRegistry()
    parser = registry.build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"usage: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        return int(e.code or 0)

    if args.verbose:
        setup_logging(logging.DEBUG)

    flags = {k: v for k, v in vars(args).items() if k not in _FRONT_END_ARGS}
    result = registry.execute(args.command, flags, args.config_file)
    metadata = result.get("metadata") or {}
    code = int(metadata.get("exit_code", 0 if result["success"] else 1))

    # failed checks still produce a report
    stream = sys.stdout if result["success"] or metadata.get("report") else sys.stderr
    text = result["output"]
    stream.write(text if text.endswith("\n") else text + "\n")
    logger.debug("%s exited with %d", args.command, code)
    return code
