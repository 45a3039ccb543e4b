from pydantic import BaseModel, Field

from app.core.config import config

# Clinical count budget of a whole-study acquisition
DEFAULT_TARGET_COUNTS = 5e6


class NoiseConfig(BaseModel):
    """Count scaling and Poisson realization settings"""
    target_total_counts: float = Field(default=DEFAULT_TARGET_COUNTS, gt=0, description="Expected total counts after scaling")
    seed: int = Field(default=config.DEFAULT_SEED, ge=0, lt=2**64, description="Root seed of the sampler")


class NoiseResult(BaseModel):
    """Bookkeeping returned by the noise stage"""
    scale: float = Field(..., description="Factor applied to the noiseless projections")
    seed: int
    target_total_counts: float
    sampled_total_counts: float
