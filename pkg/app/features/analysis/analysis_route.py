from pathlib import Path
import logging

from app.core.error_handlers import EXIT_OK, SimulationError, handle_service_error
from .analysis_service import analysis_service

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    analyze = subparsers.add_parser("analyze", help="RC_max per sphere and iteration, line profiles")
    analyze.add_argument("--recon", required=True, help="Directory with iter_NNN volumes")
    analyze.add_argument("--phantom", required=True, help="Phantom directory (ground truth and sphere layout)")
    analyze.add_argument("--out", required=True, help="Analysis directory")
    analyze.add_argument("--tag", required=True, help="Name used in rc_<tag>.csv")
    analyze.add_argument("--result", help="result.json of the reconstruction (default: <recon>/result.json)")
    analyze.add_argument("--profile-diameters", type=float, nargs="*", default=[37.0, 17.0])
    analyze.set_defaults(handler=analyze_recon)

    report = subparsers.add_parser("report", help="SVG figures, PNG slices and summary from analysis outputs")
    report.add_argument("--analysis", required=True, help="Analysis directory")
    report.add_argument("--phantom", required=True, help="Phantom directory")
    report.add_argument(
        "--recon", nargs="*", default=[], metavar="NAME=DIR", help="Reconstruction directories for slice previews"
    )
    report.add_argument("--out", required=True, help="Report directory")
    report.set_defaults(handler=build_report)


def analyze_recon(args) -> int:
    try:
        _, report = analysis_service.run_stage(
            Path(args.recon),
            Path(args.phantom),
            Path(args.out),
            args.tag,
            result_path=Path(args.result) if args.result else None,
            profile_diameters=args.profile_diameters,
        )
        logger.info(f"analyze: {len(report.rows)} RC rows for {args.tag}")
        return EXIT_OK
    except SimulationError:
        raise
    except Exception as e:
        raise handle_service_error(e, "analyze", "RC analysis")


def build_report(args) -> int:
    try:
        recon_dirs = {}
        for item in args.recon:
            name, sep, directory = item.partition("=")
            if not sep:
                raise ValueError(f"--recon expects NAME=DIR, got '{item}'")
            recon_dirs[name] = Path(directory)
        analysis_service.build_report(Path(args.analysis), Path(args.phantom), recon_dirs, Path(args.out))
        return EXIT_OK
    except SimulationError:
        raise
    except Exception as e:
        raise handle_service_error(e, "report", "report generation")
