from pathlib import Path
import logging

from pydantic import ValidationError

from app.core.error_handlers import (
    EXIT_OK,
    SimulationError,
    config_error_from_validation,
    handle_service_error,
)
from app.core.volume_io import write_volume
from app.features.pipeline.pipeline_service import pipeline_service, resolve_phantom_spec, study_from_args
from .recon_schema import Algorithm, InitMode, ReconParams
from .recon_service import recon_service

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("reconstruct", help="MLEM / OSEM / MAP-Ent reconstruction with per-iteration snapshots")
    parser.add_argument("--counts", required=True, help="Sampled projections (stem, .json or .raw)")
    parser.add_argument("--attenuation", required=True, help="Attenuation volume used by the projector")
    parser.add_argument("--out", required=True, help="Output directory for iter_NNN volumes")
    parser.add_argument("--config", help="Study file; with --variant, takes parameters from that variant")
    parser.add_argument("--variant", help="Variant name in the study file")
    parser.add_argument("--fast", action="store_true")
    parser.add_argument("--algo", choices=[a.value for a in Algorithm], default=Algorithm.OSEM.value)
    parser.add_argument("--iters", type=int, default=4)
    parser.add_argument("--subsets", type=int, default=None, help="OSEM subsets (default 10 for OSEM, else 1)")
    parser.add_argument("--gamma", type=float, help="MAP-Ent gamma")
    parser.add_argument("--gamma-map", help="Voxelwise gamma volume for MAP-Ent")
    parser.add_argument("--snapshot-every", type=int, default=1)
    parser.add_argument("--init", choices=[m.value for m in InitMode], default=InitMode.UNIFORM_SCALED.value)
    parser.set_defaults(handler=reconstruct)


def _params_from_flags(args) -> ReconParams:
    algorithm = Algorithm(args.algo)
    subsets = args.subsets if args.subsets is not None else (10 if algorithm == Algorithm.OSEM else 1)
    try:
        return ReconParams(
            algorithm=algorithm,
            n_iterations=args.iters,
            n_subsets=subsets,
            gamma=args.gamma,
            gamma_map_id=Path(args.gamma_map).name if args.gamma_map else None,
            snapshot_every=args.snapshot_every,
            init=InitMode(args.init),
        )
    except ValidationError as e:
        raise config_error_from_validation(e, "reconstruct flags")


def reconstruct(args) -> int:
    """
    Reconstruct subcommand
    - Parameters from --variant of the study file, or from flags
    - Local-gamma variants get their gamma map built first, as in the full pipeline
    """
    try:
        out_dir = Path(args.out)
        gamma_map = Path(args.gamma_map) if args.gamma_map else None
        if args.variant:
            study = study_from_args(args)
            variant = study.variant(args.variant)
            params = variant.to_params()
            if variant.uses_gamma_map:
                gamma = pipeline_service.build_gamma_map(
                    variant, resolve_phantom_spec(study.phantom), Path(args.counts), Path(args.attenuation)
                )
                write_volume(out_dir / "gamma_map", gamma)
                gamma_map = out_dir / "gamma_map"
        else:
            params = _params_from_flags(args)
        recon_service.run_stage(Path(args.counts), Path(args.attenuation), params, out_dir, gamma_map)
        return EXIT_OK
    except SimulationError:
        raise
    except Exception as e:
        raise handle_service_error(e, "reconstruct", "reconstruction")
