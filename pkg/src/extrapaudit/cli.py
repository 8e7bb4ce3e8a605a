"""Command-line entry point: ``extrapaudit <stage> [options]``.

Exit codes: 0 success, 2 configuration, 3 data or missing stage artifact,
4 network, 5 estimation.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .calibration import CalibrationError
from .econometrics import EstimationError
from .forecasters import AuthenticationError, BACKENDS, CacheCorruptionError, ConfigError, TransportError
from .panel import PanelError
from .pipeline import STAGES, RunConfigError, StageError, resolve_config
from .prompts import AnonymizationError, PromptError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NETWORK = 4
EXIT_ESTIMATION = 5

STAGE_HELP = {
    "simulate": "generate synthetic data (or import data files) into the run directory",
    "prompts": "build prompt bundles from the data",
    "query": "send prompts to the forecaster and store QueryRecords",
    "estimate": "run the regression battery on stored responses",
    "calibrate": "bias and coverage statistics for distribution forecasts",
    "report": "regenerate all tables and figures from stored responses",
}


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON); defaults to <out>/run_config.json")
    common.add_argument("--out", help="run directory")
    common.add_argument("--seed", type=_seed, help="seed for data generation and synthetic forecasters")
    common.add_argument("--lags", type=int, choices=(12, 24), help="weeks of returns shown per contest")
    common.add_argument("--backend", choices=BACKENDS, help="forecaster backend")
    common.add_argument("--max-parallel", type=_positive, help="concurrent forecaster requests")
    common.add_argument("--experiment", choices=("rank_contest", "sentiment", "distribution", "chart_rank"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="extrapaudit", description="Audit forecasters for extrapolative expectations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in STAGE_HELP.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (RunConfigError, ConfigError)):
        return EXIT_CONFIG
    if isinstance(exc, (TransportError, AuthenticationError)):
        return EXIT_NETWORK
    if isinstance(exc, (EstimationError, CalibrationError)):
        return EXIT_ESTIMATION
    if isinstance(exc, (StageError, PanelError, PromptError, AnonymizationError, CacheCorruptionError,
                        FileNotFoundError)):
        return EXIT_DATA
    raise exc


def main(argv=None, transport=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "lags": args.lags, "backend": args.backend,
                 "max_parallel": args.max_parallel, "experiment": args.experiment}
    try:
        config = resolve_config(args.config, args.out, overrides)
        stage = STAGES[args.command]
        result = stage(config, transport=transport) if args.command == "query" else stage(config)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"extrapaudit {args.command}: error: {exc}", file=sys.stderr)
        return code
    state = "up to date" if result.skipped else "done"
    extra = f" ({result.message})" if result.message and not result.skipped else ""
    print(f"{result.stage}: {state}{extra} -> {result.directory}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
