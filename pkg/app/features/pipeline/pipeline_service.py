"""
Study orchestration: phantom -> projections -> noise -> reconstructions -> filtering -> analysis -> report.

Every stage reads and writes core-format files through the same service calls the
subcommands use. A stage is skipped when its input hash (canonical JSON of its config
section plus the hashes of its input files) and its recorded outputs match the manifest
of the previous run.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union
import json
import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import ValidationError

from app.core.config import config
from app.core.error_handlers import (
    ConfigError,
    ErrorMessages,
    config_error_from_validation,
    handle_service_error,
)
from app.core.volume import Grid3, Volume
from app.core.volume_io import read_projections, read_volume, write_volume
from app.features.analysis.analysis_service import analysis_service
from app.features.noise.noise_service import noise_service
from app.features.phantom.phantom_schema import PhantomBuildRequest, PhantomSpec
from app.features.phantom.phantom_service import phantom_service
from app.features.postfilter.postfilter_service import postfilter_service
from app.features.projector.projector_schema import AcquisitionGeometry
from app.features.projector.projector_service import SpectProjector, projector_service
from app.features.recon.recon_schema import Algorithm, ReconParams
from app.features.recon.recon_service import recon_service
from app.utils.hashing import canonical_hash, sha256_file
from .pipeline_schema import GammaRegionSource, ReconVariant, StudyConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_study_config(path: PathLike) -> StudyConfig:
    """
    Read a JSON or TOML study file

    Raises:
        ConfigError: unreadable file, syntax error (with line/column) or failed validation
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(ErrorMessages.MISSING_INPUT.format(path=path), field="config")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            raw = tomllib.loads(text)
        else:
            raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"Cannot parse {path}: {e.msg}",
            details=[{"source": str(path), "line": e.lineno, "column": e.colno, "message": e.msg}],
        )
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Cannot parse {path}: {e}", details=[{"source": str(path), "message": str(e)}])
    try:
        return StudyConfig.model_validate(raw)
    except ValidationError as e:
        raise config_error_from_validation(e, str(path))


def resolve_phantom_spec(request: PhantomBuildRequest) -> PhantomSpec:
    spec = request.spec if request.spec is not None else phantom_service.preset(request.preset)
    if request.contrast is not None:
        spec = phantom_service.with_contrast(spec, request.contrast)
    if request.subsamples is not None:
        spec = spec.model_copy(update={"subsamples": request.subsamples})
    return spec


def materialize(study: StudyConfig, fast: bool) -> Dict[str, Any]:
    """Config as recorded in the manifest, every default filled in; output_dir is not part of it"""
    dumped = study.model_dump(mode="json", exclude={"output_dir"})
    dumped["phantom"]["resolved_spec"] = resolve_phantom_spec(study.phantom).model_dump(mode="json")
    dumped["fast"] = fast
    return dumped


@dataclass
class PipelineResult:
    """Outcome of run_pipeline"""
    exit_code: int
    manifest_path: Path
    executed: List[str] = field(default_factory=list)
    cached: List[str] = field(default_factory=list)


class StudyLayout:
    """Fixed directory layout inside the output directory"""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.phantom = self.root / "phantom"
        self.projections = self.root / "projections"
        self.noisy = self.root / "noisy"
        self.analysis = self.root / "analysis"
        self.report = self.root / "report"
        self.manifest = self.root / config.MANIFEST_NAME

    def recon(self, variant: str) -> Path:
        return self.root / "recon" / variant

    def filtered(self, variant: str) -> Path:
        return self.root / "filtered" / variant


class PipelineService:
    """Runs a whole study with stage caching and a content manifest"""

    def __init__(self):
        self._manifest: Dict[str, Any] = {}
        self._previous: Dict[str, Any] = {}
        self._layout: Optional[StudyLayout] = None

    # -- manifest -----------------------------------------------------------------

    def _rel(self, path: Path) -> str:
        return Path(path).resolve().relative_to(self._layout.root.resolve()).as_posix()

    def _load_previous(self) -> Dict[str, Any]:
        if self._layout.manifest.exists():
            try:
                return json.loads(self._layout.manifest.read_text())
            except json.JSONDecodeError:
                logger.warning(f"Ignoring unreadable manifest {self._layout.manifest}")
        return {}

    def _write_manifest(self) -> None:
        files = {}
        for path in sorted(self._layout.root.rglob("*")):
            if path.is_file() and path != self._layout.manifest:
                files[self._rel(path)] = sha256_file(path)
        self._manifest["files"] = files
        self._layout.manifest.write_text(json.dumps(self._manifest, indent=2, sort_keys=True) + "\n")

    def _input_hash(self, section: Any, inputs: Sequence[Path]) -> str:
        return canonical_hash(
            {"section": section, "inputs": {self._rel(p): sha256_file(p) for p in sorted(set(inputs))}}
        )

    def _is_cached(self, name: str, input_hash: str) -> bool:
        record = self._previous.get("stages", {}).get(name)
        if not record or record.get("status") != "ok" or record.get("input_hash") != input_hash:
            return False
        known = self._previous.get("files", {})
        for rel in record.get("outputs", []):
            path = self._layout.root / rel
            if not path.exists() or known.get(rel) != sha256_file(path):
                return False
        return True

    def _stage(
        self,
        name: str,
        section: Any,
        inputs: Sequence[Path],
        action: Callable[[], List[Path]],
        result: PipelineResult,
    ) -> List[Path]:
        input_hash = self._input_hash(section, inputs)
        stages = self._manifest.setdefault("stages", {})
        if self._is_cached(name, input_hash):
            logger.info(f"Stage {name}: inputs unchanged, using cached outputs")
            record = self._previous["stages"][name]
            stages[name] = record
            result.cached.append(name)
            return [self._layout.root / rel for rel in record["outputs"]]

        logger.info(f"Stage {name}: running")
        try:
            outputs = action()
        except Exception as e:
            stages[name] = {"input_hash": input_hash, "outputs": [], "status": "failed", "error": str(e)}
            self._write_manifest()
            raise handle_service_error(e, name, "pipeline stage")
        stages[name] = {
            "input_hash": input_hash,
            "outputs": sorted({self._rel(p) for p in outputs}),
            "status": "ok",
        }
        self._write_manifest()
        result.executed.append(name)
        logger.info(f"Stage {name}: wrote {len(stages[name]['outputs'])} file(s)")
        return [Path(p) for p in outputs]

    # -- gamma maps -----------------------------------------------------------------

    def build_gamma_map(
        self,
        variant: ReconVariant,
        spec: PhantomSpec,
        counts: Path,
        attenuation: Path,
    ) -> Volume:
        """Voxelwise gamma for a local-regularization variant"""
        att = read_volume(attenuation)
        grid = att.grid
        table = {r.diameter_mm: r.gamma for r in variant.gamma_regions}
        masks = phantom_service.sphere_masks(spec, grid, enabled_only=False)
        masks = {d: masks[d] for d in table if d in masks}
        missing = sorted(set(table) - set(masks))
        if missing:
            logger.warning(f"Variant {variant.name}: no sphere with diameter(s) {missing}; regions ignored")

        if variant.gamma_region_source == GammaRegionSource.MASKS:
            gamma = recon_service.gamma_map_from_masks(
                masks, {d: table[d] for d in masks}, variant.gamma, grid
            )
        else:
            proj = read_projections(counts)
            geometry = AcquisitionGeometry.model_validate(proj.metadata["geometry"])
            seg = variant.segmentation
            prerecon = recon_service.run(
                ReconParams(
                    algorithm=Algorithm.OSEM,
                    n_iterations=seg.n_iterations,
                    n_subsets=seg.n_subsets,
                    init=variant.init,
                    snapshot_every=0,
                    track_loglik=False,
                ),
                proj,
                SpectProjector(grid, geometry, att),
            ).final
            scale = float(proj.metadata.get("scale", 1.0))
            labels = recon_service.segment_lesions(
                prerecon, seg.background_factor * spec.background_activity * scale, seg.threshold_frac
            )
            per_label: Dict[int, float] = {}
            for d, mask in masks.items():
                label = recon_service.label_for_mask(labels, mask)
                if label is None:
                    logger.warning(f"Variant {variant.name}: no segmented region overlaps the {d:g} mm sphere")
                    continue
                per_label[label] = table[d]
            gamma = recon_service.gamma_map_from_labels(labels, per_label, variant.gamma)
        return gamma.with_values(gamma.values, gamma_map_id=variant.gamma_id)

    # -- run ------------------------------------------------------------------------

    def run_pipeline(
        self,
        study: StudyConfig,
        fast: bool = False,
        output_dir: Optional[PathLike] = None,
    ) -> PipelineResult:
        """
        Execute every stage of the study

        Args:
            study: Validated study configuration
            fast: Run the reduced-scale study
            output_dir: Overrides study.output_dir

        Returns:
            PipelineResult with exit code 0; failures raise SimulationError after
            the partial manifest has been written
        """
        if fast:
            study = study.fast()
        self._layout = layout = StudyLayout(output_dir or study.output_dir)
        layout.root.mkdir(parents=True, exist_ok=True)
        self._previous = self._load_previous()
        materialized = materialize(study, fast)
        self._manifest = {"config": materialized, "config_hash": canonical_hash(materialized), "stages": {}}
        result = PipelineResult(exit_code=0, manifest_path=layout.manifest)

        grid: Grid3 = study.grid.to_grid()
        spec = resolve_phantom_spec(study.phantom)
        provenance = {"config_hash": self._manifest["config_hash"], "seed": study.noise.seed}
        logger.info(f"Study {study.name}: {grid.nx}x{grid.ny}x{grid.nz} @ {grid.pitch} mm, {len(study.variants)} variant(s)")

        phantom_out = self._stage(
            "phantom",
            {"grid": materialized["grid"], "phantom": materialized["phantom"]},
            [],
            lambda: phantom_service.run_stage(spec, grid, layout.phantom),
            result,
        )
        project_out = self._stage(
            "project",
            materialized["geometry"],
            phantom_out,
            lambda: projector_service.run_stage(layout.phantom, study.geometry, layout.projections),
            result,
        )
        noise_out = self._stage(
            "addnoise",
            materialized["noise"],
            project_out,
            lambda: noise_service.run_stage(layout.projections / "mean", study.noise, layout.noisy)[0],
            result,
        )

        counts = layout.noisy / "counts"
        attenuation = layout.phantom / "attenuation"
        recon_dirs: Dict[str, Path] = {}
        analysis_inputs: List[Path] = []
        for variant in study.variants:
            recon_dir = layout.recon(variant.name)
            recon_dirs[variant.name] = recon_dir

            def _reconstruct(variant=variant, recon_dir=recon_dir) -> List[Path]:
                paths: List[Path] = []
                gamma_path = None
                if variant.uses_gamma_map:
                    gamma = self.build_gamma_map(variant, spec, counts, attenuation)
                    paths += write_volume(recon_dir / "gamma_map", gamma)
                    gamma_path = recon_dir / "gamma_map"
                return paths + recon_service.run_stage(counts, attenuation, variant.to_params(), recon_dir, gamma_path)

            recon_out = self._stage(
                f"reconstruct:{variant.name}",
                variant.model_dump(mode="json"),
                noise_out + phantom_out,
                _reconstruct,
                result,
            )
            snapshot_files = sorted(p for p in recon_out if p.name.startswith("iter_") and p.suffix == ".json")

            analysis_inputs += self._stage(
                f"analyze:{variant.name}",
                {"tag": variant.name, "profiles": study.report.profile_diameters, "provenance": provenance},
                recon_out + phantom_out,
                lambda variant=variant, recon_dir=recon_dir: analysis_service.run_stage(
                    recon_dir, layout.phantom, layout.analysis, variant.name,
                    profile_diameters=study.report.profile_diameters, provenance=provenance,
                )[0],
                result,
            )

            if variant.filtered:
                filtered_dir = layout.filtered(variant.name)
                filter_out = self._stage(
                    f"filter:{variant.name}",
                    materialized["filter"],
                    snapshot_files,
                    lambda files=snapshot_files, out=filtered_dir: postfilter_service.run_stage(files, study.filter, out),
                    result,
                )
                tag = f"{variant.name}_filtered"
                analysis_inputs += self._stage(
                    f"analyze:{tag}",
                    {"tag": tag, "profiles": study.report.profile_diameters, "provenance": provenance},
                    filter_out + recon_out + phantom_out,
                    lambda recon_dir=recon_dir, out=filtered_dir, tag=tag: analysis_service.run_stage(
                        out, layout.phantom, layout.analysis, tag,
                        result_path=recon_dir / "result.json",
                        profile_diameters=study.report.profile_diameters,
                        provenance={**provenance, "filter": materialized["filter"]},
                    )[0],
                    result,
                )
                recon_dirs[tag] = filtered_dir

        self._stage(
            "report",
            materialized["report"],
            analysis_inputs + phantom_out,
            lambda: analysis_service.build_report(
                layout.analysis,
                layout.phantom,
                recon_dirs,
                layout.report,
                rc_window=study.report.rc_window,
                local_window=study.report.local_gamma_window,
                formats=study.report.formats,
            ),
            result,
        )
        self._write_manifest()
        logger.info(
            f"Study finished: {len(result.executed)} stage(s) run, {len(result.cached)} cached; manifest {layout.manifest}"
        )
        return result


# Create a singleton instance
pipeline_service = PipelineService()

run_pipeline = pipeline_service.run_pipeline


def default_study() -> StudyConfig:
    """Canonical protocol defaults with a single filtered OSEM 10x4 variant"""
    return StudyConfig(
        variants=[ReconVariant(name="osem", algorithm=Algorithm.OSEM, n_iterations=4, n_subsets=10, filtered=True)]
    )


def study_from_args(args) -> StudyConfig:
    """Study named by --config (canonical defaults otherwise), reduced when --fast is given"""
    path = getattr(args, "config", None)
    study = load_study_config(path) if path else default_study()
    return study.fast() if getattr(args, "fast", False) else study
