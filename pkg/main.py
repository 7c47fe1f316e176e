import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from config import COMMANDS, FORMATS, SE_REGIMES, VERSION, RunConfig, Settings
from logging_config import setup_logging
from services.errors import NumericalError, UserInputError
from services.orchestrator import Orchestrator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser(settings: Settings) -> ArgumentParser:
    parser = ArgumentParser(
        prog="ivgap",
        description="Decompose the gap between IV and OLS estimates into covariate weights, "
                    "treatment-level weights and marginal effects.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--data", help="input CSV file")
    parser.add_argument("--model", help="JSON model configuration")
    parser.add_argument("--dgp", help="JSON description of a discrete population")
    parser.add_argument("--out", default="results", help="output directory")
    parser.add_argument("--mode", choices=("standard", "did-rd"), help="override the model's mode")
    parser.add_argument("--se", choices=SE_REGIMES, default=settings.SE_REGIME)
    parser.add_argument("--compare-se", action="store_true", help="also report corrected-regime SEs next to plugin ones")
    parser.add_argument("--cluster", help="cluster column")
    parser.add_argument("--weights", help="row-weight column")
    parser.add_argument("--bin", type=float, default=0.0, help="merge treatment levels below this frequency share")
    parser.add_argument("--threads", type=int, default=settings.THREADS)
    parser.add_argument("--seed", type=int, default=settings.SEED)
    parser.add_argument("--format", choices=FORMATS, default=settings.FORMAT)
    parser.add_argument("--n", type=int, default=10000, help="sample size for simulate and mc-study")
    parser.add_argument("--reps", type=int, default=200, help="Monte Carlo replications")
    parser.add_argument("--targets", help="comma-separated Monte Carlo targets")
    parser.add_argument("--version", action="version", version=f"ivgap {VERSION}")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    try:
        settings = Settings()
    except ValidationError as e:
        print(f"ivgap: invalid environment settings: {e}", file=sys.stderr)
        return EXIT_USER
    setup_logging(settings.LOG_LEVEL)

    try:
        args = build_parser(settings).parse_args(argv)
        options = {key: value for key, value in vars(args).items() if value is not None}
        if "targets" in options:
            options["targets"] = [t.strip() for t in options["targets"].split(",") if t.strip()]
        run_config = RunConfig(**options)
        written = Orchestrator(run_config).execute()
    except UsageError as e:
        print(f"ivgap: error: {e}", file=sys.stderr)
        return EXIT_USER
    except ValidationError as e:
        print(f"ivgap: error: {e}", file=sys.stderr)
        return EXIT_USER
    except UserInputError as e:
        print(f"ivgap: error: {e.message}", file=sys.stderr)
        return EXIT_USER
    except NumericalError as e:
        print(f"ivgap: numerical failure: {e.message}", file=sys.stderr)
        return EXIT_NUMERICAL

    logger.info(f"Done: {len(written)} files written")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
