import argparse
import logging
import sys
from typing import Optional, Sequence

from cmkd import __version__
from cmkd.commands import ablate, evaluate, export, generate, gradcheck, train
from cmkd.config import setup_logging
from cmkd.exceptions import EXIT_RUNTIME, CmkdError, ConfigError

logger = logging.getLogger("cmkd")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmkd",
        description="Uncertainty-aware cross-modal knowledge distillation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--log-level",
        type=str.upper,
        choices=sorted(logging.getLevelNamesMapping()),
        help="overrides CMKD_LOG_LEVEL",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include commands
    generate.register(subparsers)
    train.register(subparsers)
    evaluate.register(subparsers)
    ablate.register(subparsers)
    gradcheck.register(subparsers)
    export.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit codes: 0 success, 1 runtime failure, 2 usage or config error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_RUNTIME

    try:
        setup_logging(args.log_level)
    except ConfigError as exc:
        print(f"cmkd: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    logger.info("cmkd %s: %s", __version__, args.command)
    try:
        code = args.handler(args)
    except CmkdError as exc:
        logger.error("%s failed: %s", args.command, exc.detail)
        return exc.exit_code
    except Exception as exc:
        logger.error("%s failed unexpectedly: %s", args.command, exc)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    logger.info("%s finished", args.command)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
