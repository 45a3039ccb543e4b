from pathlib import Path
import logging

from app.core.error_handlers import EXIT_OK, SimulationError, handle_service_error
from app.features.pipeline.pipeline_service import study_from_args
from .postfilter_schema import PadMode
from .postfilter_service import postfilter_service

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("filter", help="3-D Butterworth post-filter of reconstructed snapshots")
    parser.add_argument("--inputs", required=True, help="Directory holding iter_NNN volumes")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--config", help="Study file supplying the filter section")
    parser.add_argument("--order", type=float)
    parser.add_argument("--cutoff", type=float, help="cycles/mm")
    parser.add_argument("--pad-mode", choices=[m.value for m in PadMode])
    parser.add_argument("--pad-voxels", type=int)
    parser.set_defaults(handler=filter_volumes)


def filter_volumes(args) -> int:
    try:
        params = study_from_args(args).filter
        update = {
            key: value
            for key, value in (
                ("order", args.order),
                ("cutoff", args.cutoff),
                ("pad_mode", args.pad_mode),
                ("pad_voxels", args.pad_voxels),
            )
            if value is not None
        }
        if update:
            params = params.model_validate({**params.model_dump(), **update})
        inputs = sorted(Path(args.inputs).glob("iter_*.json"))
        if not inputs:
            raise FileNotFoundError(2, "No iter_*.json volumes", args.inputs)
        postfilter_service.run_stage(inputs, params, Path(args.out))
        return EXIT_OK
    except SimulationError:
        raise
    except Exception as e:
        raise handle_service_error(e, "filter", "Butterworth filtering")
