from pathlib import Path
import logging

from app.core.error_handlers import EXIT_OK, SimulationError, handle_service_error
from app.features.pipeline.pipeline_service import study_from_args
from .noise_service import noise_service

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("addnoise", help="Scale projections to a count budget and draw Poisson counts")
    parser.add_argument("--projections", required=True, help="Mean projections (stem, .json or .raw)")
    parser.add_argument("--out", required=True, help="Output directory (counts)")
    parser.add_argument("--config", help="Study file supplying the noise section")
    parser.add_argument("--fast", action="store_true", help="5e5 counts")
    parser.add_argument("--counts", type=float, help="Target total counts")
    parser.add_argument("--seed", type=int, help="Sampler seed")
    parser.set_defaults(handler=add_noise)


def add_noise(args) -> int:
    try:
        noise = study_from_args(args).noise
        if args.counts is not None:
            noise = noise.model_validate({**noise.model_dump(), "target_total_counts": args.counts})
        if args.seed is not None:
            noise = noise.model_validate({**noise.model_dump(), "seed": args.seed})
        _, result = noise_service.run_stage(Path(args.projections), noise, Path(args.out))
        logger.info(f"addnoise: scale {result.scale:.6g}, {result.sampled_total_counts:.0f} counts")
        return EXIT_OK
    except SimulationError:
        raise
    except Exception as e:
        raise handle_service_error(e, "addnoise", "Poisson sampling")
