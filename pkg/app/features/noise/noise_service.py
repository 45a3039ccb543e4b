from pathlib import Path
from typing import List, Tuple
import logging

import numpy as np
from scipy import stats

from app.core.config import config
from app.core.error_handlers import (
    ErrorMessages,
    InvalidParameterError,
    create_error,
    require_positive,
)
from app.core.volume import ProjectionSet
from app.core.volume_io import read_projections, write_projections
from .noise_schema import NoiseConfig, NoiseResult

logger = logging.getLogger(__name__)


class NoiseService:
    """Count-budget scaling and reproducible Poisson sampling of projection data"""

    def __init__(self, block_size: int = config.NOISE_BLOCK_SIZE):
        self.block_size = block_size

    def scale_to_counts(self, proj: ProjectionSet, target: float) -> Tuple[ProjectionSet, float]:
        """
        Rescale mean projections so that they sum to target

        Args:
            proj: Noiseless projections
            target: Desired total counts

        Returns:
            (scaled projections, scale factor = target / sum)
        """
        require_positive(target, "target_total_counts")
        total = proj.total()
        if not total > 0:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.ZERO_PROJECTIONS.format(target=target),
                field="projections",
            )
        scale = target / total
        logger.info(f"Scaling projections from {total:.6g} to {target:.6g} counts (scale {scale:.6g})")
        return proj.with_data(proj.data * scale, scale=scale), scale

    def poisson_sample(self, proj: ProjectionSet, seed: int) -> ProjectionSet:
        """
        Independent Poisson draw per bin, reproducible for a given seed

        Bins are processed in fixed blocks of the flattened (view, v, u) order; block b draws from
        its own stream SeedSequence(seed, spawn_key=(b,)), so results do not depend on how blocks
        are scheduled. Each bin consumes exactly one uniform and is inverted through the Poisson
        CDF, so two studies with the same seed and nearby means (a phantom with some spheres
        removed) get bin-wise coupled realizations.
        """
        means = np.asarray(proj.data, dtype=np.float64).ravel()
        if not np.all(np.isfinite(means)) or np.any(means < 0):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(param="mean", reason="Poisson means must be finite and >= 0"),
                field="projections",
            )
        counts = np.zeros_like(means)
        for b, start in enumerate(range(0, means.size, self.block_size)):
            block = means[start:start + self.block_size]
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
            uniforms = rng.random(block.size)
            hot = block > 0
            # ppf(0) is -1
            counts[start:start + block.size][hot] = np.maximum(stats.poisson.ppf(uniforms[hot], block[hot]), 0.0)
        return proj.with_data(counts.reshape(proj.data.shape), seed=seed, noise="poisson")

    def add_noise(self, proj: ProjectionSet, noise: NoiseConfig) -> Tuple[ProjectionSet, float]:
        """scale_to_counts followed by poisson_sample"""
        scaled, scale = self.scale_to_counts(proj, noise.target_total_counts)
        sampled = self.poisson_sample(scaled, noise.seed)
        logger.info(f"Sampled {sampled.total():.0f} counts with seed {noise.seed}")
        return sampled, scale

    def run_stage(self, projections: Path, noise: NoiseConfig, out_dir: Path) -> Tuple[List[Path], NoiseResult]:
        proj = read_projections(projections)
        sampled, scale = self.add_noise(proj, noise)
        result = NoiseResult(
            scale=scale,
            seed=noise.seed,
            target_total_counts=noise.target_total_counts,
            sampled_total_counts=sampled.total(),
        )
        paths = list(write_projections(Path(out_dir) / "counts", sampled, **result.model_dump()))
        return paths, result


# Create a singleton instance
noise_service = NoiseService()

scale_to_counts = noise_service.scale_to_counts
poisson_sample = noise_service.poisson_sample
add_noise = noise_service.add_noise
