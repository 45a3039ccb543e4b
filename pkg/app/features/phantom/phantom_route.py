from pathlib import Path
import logging

from app.core.error_handlers import EXIT_OK, SimulationError, handle_service_error
from app.features.pipeline.pipeline_service import resolve_phantom_spec, study_from_args
from .phantom_schema import PhantomPreset
from .phantom_service import phantom_service

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("phantom", help="Build the digital NEMA IEC phantom (activity + attenuation)")
    parser.add_argument("--preset", choices=[p.value for p in PhantomPreset], help="Overrides the study preset")
    parser.add_argument("--contrast", type=float, help="Sphere/background activity ratio")
    parser.add_argument("--config", help="Study file (JSON or TOML) supplying grid and phantom")
    parser.add_argument("--fast", action="store_true", help="Reduced 64x64x46 grid at 8 mm")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.set_defaults(handler=build_phantom)


def build_phantom(args) -> int:
    """
    Phantom subcommand
    - Resolves the phantom spec from the study, preset and contrast
    - Writes activity, attenuation and phantom_spec.json
    """
    try:
        study = study_from_args(args)
        request = study.phantom
        if args.preset:
            request = request.model_copy(update={"preset": PhantomPreset(args.preset), "spec": None})
        if args.contrast is not None:
            request = request.model_copy(update={"contrast": args.contrast})
        paths = phantom_service.run_stage(resolve_phantom_spec(request), study.grid.to_grid(), Path(args.out))
        logger.info(f"phantom: wrote {len(paths)} file(s) to {args.out}")
        return EXIT_OK
    except SimulationError:
        raise
    except Exception as e:
        raise handle_service_error(e, "phantom", "build phantom")
