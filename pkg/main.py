import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from pydantic import ValidationError

# Add the current directory to Python path for imports
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app.core.config import config
from app.core.error_handlers import (
    EXIT_CONFIG_ERROR,
    EXIT_RUNTIME_FAILURE,
    SimulationError,
    config_error_from_validation,
)
from app.features.phantom.phantom_route import register as phantom_router
from app.features.projector.projector_route import register as projector_router
from app.features.noise.noise_route import register as noise_router
from app.features.recon.recon_route import register as recon_router
from app.features.postfilter.postfilter_route import register as postfilter_router
from app.features.analysis.analysis_route import register as analysis_router
from app.features.pipeline.pipeline_route import register as pipeline_router

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spect-study",
        description="SPECT simulation and statistical reconstruction of the NEMA IEC phantom",
    )
    parser.add_argument("--threads", type=int, help="Worker threads (overrides SPECT_THREADS)")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="Logging level (default from LOG_LEVEL)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include routers
    phantom_router(subparsers)
    projector_router(subparsers)
    noise_router(subparsers)
    recon_router(subparsers)
    postfilter_router(subparsers)
    analysis_router(subparsers)
    pipeline_router(subparsers)
    return parser


def _report(error: SimulationError) -> None:
    """Structured error on stderr"""
    print(json.dumps(error.to_dict(), indent=2, default=str), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # Configure logging
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    if args.threads:
        config.THREADS = max(1, args.threads)

    try:
        return args.handler(args)
    except ValidationError as exc:
        error = config_error_from_validation(exc, args.command)
        _report(error)
        return EXIT_CONFIG_ERROR
    except SimulationError as exc:
        logger.error(f"{args.command} failed: {exc.error_type}: {exc.message}")
        _report(exc)
        return exc.exit_code
    except Exception as exc:
        logger.error(f"Unexpected error in {args.command}: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME_FAILURE


if __name__ == "__main__":
    sys.exit(main())
