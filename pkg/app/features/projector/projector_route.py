from pathlib import Path
import logging

from app.core.error_handlers import EXIT_OK, SimulationError, handle_service_error
from app.features.pipeline.pipeline_service import study_from_args
from .projector_schema import ViewWeighting
from .projector_service import projector_service

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("project", help="Noiseless projections of a phantom")
    parser.add_argument("--phantom", required=True, help="Directory written by the phantom subcommand")
    parser.add_argument("--out", required=True, help="Output directory (projections/mean)")
    parser.add_argument("--config", help="Study file supplying the acquisition geometry")
    parser.add_argument("--fast", action="store_true", help="60 views")
    parser.add_argument("--views", type=int, help="Number of views")
    parser.add_argument("--no-psf", action="store_true", help="Disable the collimator blur")
    parser.add_argument("--no-attenuation", action="store_true", help="Disable attenuation")
    parser.add_argument("--view-weighting", choices=[w.value for w in ViewWeighting])
    parser.set_defaults(handler=project)


def project(args) -> int:
    try:
        geometry = study_from_args(args).geometry
        update = {}
        if args.views:
            update["n_views"] = args.views
        if args.no_psf:
            update["psf_on"] = False
        if args.no_attenuation:
            update["attenuation_on"] = False
        if args.view_weighting:
            update["view_weighting"] = ViewWeighting(args.view_weighting)
        if update:
            geometry = geometry.model_validate({**geometry.model_dump(), **update})
        projector_service.run_stage(Path(args.phantom), geometry, Path(args.out))
        return EXIT_OK
    except SimulationError:
        raise
    except Exception as e:
        raise handle_service_error(e, "project", "forward projection")
