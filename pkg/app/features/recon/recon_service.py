"""
Iterative reconstruction: MLEM, OSEM and MAP-Ent with an entropy prior relative to the previous iterate.

All update rules share the data ratio g_i / sum_k a_ik f_k; bins whose expected count is at or
below epsilon get ratio 0 and are counted as guarded when they hold counts.
"""
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union
import json
import logging
import math

import numpy as np
from scipy import ndimage

from app.core.error_handlers import (
    ErrorMessages,
    InvalidParameterError,
    ZeroSensitivityError,
    create_error,
    require_in_range,
    require_positive,
)
from app.core.volume import Grid3, ProjectionSet, Volume, VolumeRole
from app.core.volume_io import read_projections, read_volume, write_volume
from app.features.projector.projector_schema import AcquisitionGeometry, SubsetScheme
from app.features.projector.projector_service import SpectProjector, interleaved_subsets
from .recon_schema import Algorithm, InitMode, ReconParams, ReconResult, UpdateStats

logger = logging.getLogger(__name__)

GammaLike = Union[float, Volume]

# 6-connectivity in 3-D
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def _values(estimate: Union[Volume, np.ndarray]) -> np.ndarray:
    return estimate.values if isinstance(estimate, Volume) else np.asarray(estimate, dtype=np.float64)


def _data(proj: Union[ProjectionSet, np.ndarray]) -> np.ndarray:
    return proj.data if isinstance(proj, ProjectionSet) else np.asarray(proj, dtype=np.float64)


class ReconService:
    """Update rules, likelihood and the iteration driver"""

    def init_estimate(self, grid: Grid3, proj: ProjectionSet, mode: InitMode = InitMode.UNIFORM_ONES) -> Volume:
        mode = InitMode(mode)
        if mode == InitMode.UNIFORM_ONES:
            value = 1.0
        else:
            value = proj.total() / grid.n_voxels
            if not value > 0:
                value = 1.0
        return Volume.full(grid, value, VolumeRole.ACTIVITY)

    def _ratio(
        self,
        f: np.ndarray,
        g: np.ndarray,
        ctx: SpectProjector,
        views: Optional[Sequence[int]],
        epsilon: float,
        stats: Optional[UpdateStats],
    ) -> np.ndarray:
        expected = ctx.forward(f, views)
        selected = np.zeros(ctx.n_views, dtype=bool)
        selected[list(range(ctx.n_views)) if views is None else list(views)] = True
        ok = (expected > epsilon) & selected[:, None, None]
        ratio = np.zeros_like(expected)
        np.divide(g, expected, out=ratio, where=ok)
        guarded = int(np.count_nonzero(~ok & (g > 0) & selected[:, None, None]))
        if guarded:
            logger.warning(f"{guarded} bins with counts but expected <= {epsilon:g} were skipped")
            if stats is not None:
                stats.guarded_bins += guarded
        return ratio

    def _em_step(
        self,
        f: np.ndarray,
        g: np.ndarray,
        ctx: SpectProjector,
        views: Optional[Sequence[int]],
        epsilon: float,
        stats: Optional[UpdateStats],
    ) -> np.ndarray:
        sens = ctx.sensitivity(views)
        blind = (sens <= 0) & (f > 0)
        if blind.any():
            raise create_error(
                ZeroSensitivityError,
                ErrorMessages.ZERO_SENSITIVITY.format(count=int(blind.sum())),
                details={"views": None if views is None else list(views)},
            )
        back = ctx.backproject(self._ratio(f, g, ctx, views, epsilon, stats), views)
        new = np.zeros_like(f)
        np.divide(f * back, sens, out=new, where=sens > 0)
        return new

    def mlem_update(
        self,
        estimate: Volume,
        proj: ProjectionSet,
        ctx: SpectProjector,
        epsilon: float = 1e-12,
        stats: Optional[UpdateStats] = None,
    ) -> Volume:
        """f <- f / sum_i a_ij * sum_i a_ij g_i / (A f)_i over all views"""
        new = self._em_step(_values(estimate), _data(proj), ctx, None, epsilon, stats)
        return Volume(estimate.grid, new, VolumeRole.ACTIVITY)

    def osem_update(
        self,
        estimate: Volume,
        proj: ProjectionSet,
        scheme: SubsetScheme,
        b: int,
        ctx: SpectProjector,
        epsilon: float = 1e-12,
        stats: Optional[UpdateStats] = None,
    ) -> Volume:
        """MLEM update restricted to the views of subset b"""
        require_in_range(b, "subset", 0, scheme.n_subsets - 1)
        new = self._em_step(_values(estimate), _data(proj), ctx, scheme.views(b), epsilon, stats)
        return Volume(estimate.grid, new, VolumeRole.ACTIVITY)

    def _check_gamma(self, gamma: GammaLike, grid: Grid3) -> np.ndarray:
        if isinstance(gamma, Volume):
            if gamma.grid != grid:
                raise create_error(
                    InvalidParameterError,
                    ErrorMessages.GRID_MISMATCH.format(left=gamma.grid.model_dump(), right=grid.model_dump()),
                    field="gamma",
                )
            values = gamma.values
        else:
            values = np.asarray(float(gamma))
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise create_error(InvalidParameterError, ErrorMessages.NON_POSITIVE.format(param="gamma"), field="gamma")
        return values

    def mapent_update(
        self,
        estimate: Volume,
        proj: ProjectionSet,
        gamma: GammaLike,
        ctx: SpectProjector,
        epsilon: float = 1e-12,
        exponent_clamp: float = 50.0,
        stats: Optional[UpdateStats] = None,
    ) -> Volume:
        """
        f <- f * exp(gamma * sum_i (g_i a_ij / (A f)_i - a_ij)) on the full data

        The exponent is clamped to +-exponent_clamp; clamped voxels are counted.
        """
        gamma_values = self._check_gamma(gamma, estimate.grid)
        f = _values(estimate)
        ratio = self._ratio(f, _data(proj), ctx, None, epsilon, stats)
        exponent = gamma_values * (ctx.backproject(ratio) - ctx.sensitivity())
        clamped = int(np.count_nonzero(np.abs(exponent) > exponent_clamp))
        if clamped:
            logger.warning(f"MAP-Ent exponent clamped to +-{exponent_clamp:g} in {clamped} voxels")
            if stats is not None:
                stats.clamp_events += clamped
            exponent = np.clip(exponent, -exponent_clamp, exponent_clamp)
        return Volume(estimate.grid, f * np.exp(exponent), VolumeRole.ACTIVITY)

    def loglikelihood(self, estimate: Volume, proj: ProjectionSet, ctx: SpectProjector) -> float:
        """
        Poisson log-likelihood without the -ln g! constant

        Bins with expected 0 and g 0 contribute 0; expected 0 with g > 0 gives -inf.
        """
        expected = ctx.forward(_values(estimate))
        g = _data(proj)
        if np.any((expected <= 0) & (g > 0)):
            return -math.inf
        positive = g > 0
        return float(np.sum(g[positive] * np.log(expected[positive])) - expected.sum())

    def segment_lesions(self, prerecon: Volume, background_level: float, threshold_frac: float) -> Volume:
        """
        Label hot regions of a pre-reconstruction

        Candidate voxels exceed background_level; within each 6-connected candidate component the
        voxels above background_level + threshold_frac * (component max - background_level) are kept.
        Kept voxels are relabelled 1..K in linear order of first appearance.
        """
        if not (0 < threshold_frac < 1):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(param="threshold_frac", reason="must lie in (0, 1)"),
                field="threshold_frac",
            )
        values = prerecon.values
        candidates, n_candidates = ndimage.label(values > background_level, structure=FACE_CONNECTIVITY)
        keep = np.zeros(values.shape, dtype=bool)
        if n_candidates:
            index = np.arange(1, n_candidates + 1)
            peaks = np.asarray(ndimage.maximum(values, candidates, index))
            thresholds = np.zeros(n_candidates + 1)
            thresholds[1:] = background_level + threshold_frac * (peaks - background_level)
            keep = (candidates > 0) & (values > thresholds[candidates])
        labels, n_labels = ndimage.label(keep, structure=FACE_CONNECTIVITY)
        logger.info(f"Segmented {n_labels} lesion(s) above background {background_level:g}")
        return Volume(prerecon.grid, labels.astype(float), VolumeRole.LABELS, {"n_labels": int(n_labels)})

    def label_for_mask(self, labels: Volume, mask: Volume) -> Optional[int]:
        """Label with the largest overlap with a binary mask (None if no overlap)"""
        inside = labels.values[(mask.values > 0) & (labels.values > 0)].astype(int)
        if inside.size == 0:
            return None
        return int(np.argmax(np.bincount(inside)))

    def gamma_map_from_labels(
        self, labels: Volume, per_label_gamma: Mapping[int, float], default_gamma: float
    ) -> Volume:
        """Voxelwise gamma: table value inside its label, default elsewhere"""
        require_positive(default_gamma, "default_gamma")
        present = set(np.unique(labels.values).astype(int).tolist())
        gamma = np.full(labels.grid.shape, float(default_gamma))
        for label, value in per_label_gamma.items():
            label = int(label)
            if label not in present or label == 0:
                raise create_error(
                    InvalidParameterError,
                    ErrorMessages.INVALID_PARAMETER_VALUE.format(param="per_label_gamma", reason=f"label {label} not in label map"),
                    field="per_label_gamma",
                )
            require_positive(value, f"gamma[{label}]")
            gamma[labels.values == label] = float(value)
        return Volume(labels.grid, gamma, VolumeRole.GAMMA, {"default_gamma": default_gamma})

    def gamma_map_from_masks(self, masks: Mapping[float, Volume], per_mask_gamma: Mapping[float, float], default_gamma: float, grid: Grid3) -> Volume:
        """Voxelwise gamma from binary masks keyed like per_mask_gamma (e.g. by sphere diameter)"""
        labels = np.zeros(grid.shape)
        table: Dict[int, float] = {}
        for n, (key, value) in enumerate(per_mask_gamma.items(), start=1):
            if key not in masks:
                raise create_error(
                    InvalidParameterError,
                    ErrorMessages.INVALID_PARAMETER_VALUE.format(param="gamma_regions", reason=f"no region {key}"),
                    field="gamma_regions",
                )
            labels[masks[key].values > 0] = n
            table[n] = value
        table = {k: v for k, v in table.items() if np.any(labels == k)}
        return self.gamma_map_from_labels(Volume(grid, labels, VolumeRole.LABELS), table, default_gamma)

    def local_gamma(self, base_gamma: float, reference_iteration: int, lesion_iteration: int) -> float:
        """Gamma that makes a lesion recovering at lesion_iteration reach it at reference_iteration"""
        require_positive(base_gamma, "base_gamma")
        require_positive(reference_iteration, "reference_iteration")
        require_positive(lesion_iteration, "lesion_iteration")
        return base_gamma * lesion_iteration / reference_iteration

    def _field_of_view(self, ctx: SpectProjector, subsets: List[Optional[List[int]]]) -> np.ndarray:
        seen = np.ones(ctx.grid.shape, dtype=bool)
        for views in subsets:
            seen &= ctx.sensitivity(views) > 0
        return seen

    def run(
        self,
        params: ReconParams,
        proj: ProjectionSet,
        ctx: SpectProjector,
        gamma_map: Optional[Volume] = None,
        scale: float = 1.0,
    ) -> ReconResult:
        """
        Iterate the selected update rule

        Voxels that some update never sees (zero sensitivity) start at 0 and stay there.
        Snapshots are kept every snapshot_every iterations; the log-likelihood is traced per update.
        """
        if proj.n_views != ctx.n_views:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.GRID_MISMATCH.format(left=f"{proj.n_views} views", right=f"{ctx.n_views} views"),
            )
        algorithm = params.algorithm
        scheme = interleaved_subsets(ctx.n_views, params.n_subsets) if algorithm == Algorithm.OSEM else None
        subsets: List[Optional[List[int]]] = (
            [scheme.views(b) for b in range(scheme.n_subsets)] if scheme is not None else [None]
        )
        gamma: Optional[GammaLike] = None
        if algorithm == Algorithm.MAPENT:
            gamma = gamma_map if gamma_map is not None else params.gamma
            if gamma is None:
                raise create_error(InvalidParameterError, ErrorMessages.NON_POSITIVE.format(param="gamma"), field="gamma")
            self._check_gamma(gamma, ctx.grid)

        estimate = self.init_estimate(ctx.grid, proj, params.init)
        fov = self._field_of_view(ctx, subsets)
        masked = int(np.count_nonzero(~fov))
        if masked:
            logger.info(f"{masked} voxels outside the field of view start at 0")
            estimate = estimate.with_values(np.where(fov, estimate.values, 0.0))

        stats = UpdateStats()
        snapshots: List[Tuple[int, Volume]] = []
        trace: List[Tuple[int, float]] = []
        update = 0
        logger.info(
            f"Running {algorithm.value}: {params.n_iterations} iterations x {params.n_subsets} subsets "
            f"= {params.number_of_updates} updates"
        )
        for iteration in range(1, params.n_iterations + 1):
            for b in range(len(subsets)):
                if algorithm == Algorithm.MLEM:
                    estimate = self.mlem_update(estimate, proj, ctx, params.epsilon, stats)
                elif algorithm == Algorithm.OSEM:
                    estimate = self.osem_update(estimate, proj, scheme, b, ctx, params.epsilon, stats)
                else:
                    estimate = self.mapent_update(
                        estimate, proj, gamma, ctx, params.epsilon, params.exponent_clamp, stats
                    )
                update += 1
                if params.track_loglik:
                    trace.append((update, self.loglikelihood(estimate, proj, ctx)))
            if params.snapshot_every and iteration % params.snapshot_every == 0:
                snapshots.append((iteration, estimate.with_values(estimate.values, iteration=iteration)))
            if trace:
                logger.info(f"Iteration {iteration}: loglik {trace[-1][1]:.10g}")

        return ReconResult(
            final=estimate.with_values(estimate.values, iteration=params.n_iterations),
            params=params,
            snapshots=snapshots,
            loglik_trace=trace,
            scale=scale,
            subset_order=list(range(len(subsets))),
            guarded_bins=stats.guarded_bins,
            clamp_events=stats.clamp_events,
            masked_voxels=masked,
        )

    def write_result(self, result: ReconResult, out_dir: Path, **metadata) -> List[Path]:
        """Snapshots as iter_NNN volumes plus result.json"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths: List[Path] = []
        stored = result.snapshots or [(result.params.n_iterations, result.final)]
        if stored[-1][0] != result.params.n_iterations:
            stored = stored + [(result.params.n_iterations, result.final)]
        for iteration, volume in stored:
            paths += write_volume(
                out_dir / f"iter_{iteration:03d}",
                volume,
                iteration=iteration,
                number_of_updates=iteration * result.params.n_subsets,
                algorithm=result.params.algorithm.value,
                scale=result.scale,
                **metadata,
            )
        summary_path = out_dir / "result.json"
        summary_path.write_text(json.dumps({**result.summary(), **metadata}, indent=2, sort_keys=True))
        paths.append(summary_path)
        return paths

    def run_stage(
        self,
        counts: Path,
        attenuation: Path,
        params: ReconParams,
        out_dir: Path,
        gamma_map: Optional[Path] = None,
    ) -> List[Path]:
        """Reconstruct sampled projections; geometry and scale come from their sidecar"""
        proj = read_projections(counts)
        if "geometry" not in proj.metadata:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(param="counts", reason="sidecar carries no acquisition geometry"),
                field="counts",
            )
        geometry = AcquisitionGeometry.model_validate(proj.metadata["geometry"])
        att = read_volume(attenuation)
        ctx = SpectProjector(att.grid, geometry, att)
        gmap = read_volume(gamma_map) if gamma_map is not None else None
        result = self.run(params, proj, ctx, gamma_map=gmap, scale=float(proj.metadata.get("scale", 1.0)))
        return self.write_result(result, out_dir, seed=proj.metadata.get("seed"))


# Create a singleton instance
recon_service = ReconService()

init_estimate = recon_service.init_estimate
mlem_update = recon_service.mlem_update
osem_update = recon_service.osem_update
mapent_update = recon_service.mapent_update
loglikelihood = recon_service.loglikelihood
segment_lesions = recon_service.segment_lesions
gamma_map_from_labels = recon_service.gamma_map_from_labels
local_gamma = recon_service.local_gamma
run = recon_service.run
