import logging

from app.core.error_handlers import SimulationError, handle_service_error
from .pipeline_service import load_study_config, pipeline_service

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("run", help="Run the whole study with stage caching and a manifest")
    parser.add_argument("--config", required=True, help="Study file (JSON or TOML)")
    parser.add_argument("--fast", action="store_true", help="64x64x46 grid, 60 views, 5e5 counts")
    parser.add_argument("--output-dir", help="Overrides output_dir of the study file")
    parser.set_defaults(handler=run_study)


def run_study(args) -> int:
    """
    Full pipeline
    - Validates the study file
    - Runs or reuses every stage and writes manifest.json
    """
    try:
        study = load_study_config(args.config)
        # --fast is applied inside run_pipeline so that the manifest records it
        result = pipeline_service.run_pipeline(study, fast=args.fast, output_dir=args.output_dir)
        return result.exit_code
    except SimulationError:
        raise
    except Exception as e:
        raise handle_service_error(e, "run", "study pipeline")
