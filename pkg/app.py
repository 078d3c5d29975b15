import argparse
import logging
import sys

from dotenv import load_dotenv

from commands.experiment_commands import overrides_from_args, register_experiment_commands
from core.errors import ConfigError, NumericalFailure
from utils.config_utils import default_config_path, load_experiment_config
from utils.log_utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NUMERICAL = 2


def build_parser():
    parser = argparse.ArgumentParser(prog="ergodic", description="Gradient-tuned finite HMC chains")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_experiment_commands(subparsers)
    return parser


def exit_code_for(error):
    if error is None:
        return EXIT_OK
    if isinstance(error, NumericalFailure):
        return EXIT_NUMERICAL
    return EXIT_ERROR


def main(argv=None):
    # Load environment variables from .env file
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()

    logger.info("=" * 80)
    logger.info("ergodic %s", args.command)
    logger.info("=" * 80)

    try:
        config = load_experiment_config(args.config or default_config_path(), overrides_from_args(args))
    except ConfigError as exc:
        logger.error("✗ Configuration error: %s", exc)
        for name in exc.fields:
            logger.error("  - %s", name)
        return EXIT_ERROR

    result, error = args.handler(config, args)
    if error is not None:
        return exit_code_for(error)
    logger.info("✓ %s finished", args.command)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
