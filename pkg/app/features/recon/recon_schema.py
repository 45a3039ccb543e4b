from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from app.core.volume import Volume


class Algorithm(str, Enum):
    """Reconstruction update rules"""
    MLEM = "mlem"
    OSEM = "osem"
    MAPENT = "mapent"


class InitMode(str, Enum):
    """Initial estimate"""
    UNIFORM_ONES = "uniform-ones"
    UNIFORM_SCALED = "uniform-scaled"  # sum(g) / n_voxels everywhere


class ReconParams(BaseModel):
    """Parameters of one reconstruction run"""
    algorithm: Algorithm = Field(default=Algorithm.OSEM)
    n_iterations: int = Field(default=4, ge=1)
    n_subsets: int = Field(default=1, ge=1, description="OSEM only; MLEM and MAP-Ent use the full data")
    gamma: Optional[float] = Field(default=None, gt=0, description="MAP-Ent step, gamma = 1/beta")
    gamma_map_id: Optional[str] = Field(default=None, description="Identifier of a voxelwise gamma map, if any")
    epsilon: float = Field(default=1e-12, gt=0, description="Expected-count guard of the data ratio")
    exponent_clamp: float = Field(default=50.0, gt=0)
    init: InitMode = Field(default=InitMode.UNIFORM_ONES)
    snapshot_every: int = Field(default=1, ge=0, description="0 keeps only the final estimate")
    track_loglik: bool = Field(default=True)

    @model_validator(mode="after")
    def _check_algorithm(self) -> "ReconParams":
        if self.algorithm != Algorithm.OSEM and self.n_subsets != 1:
            raise ValueError(f"n_subsets must be 1 for {self.algorithm.value}; subsets are an OSEM feature")
        if self.algorithm == Algorithm.MAPENT and self.gamma is None and self.gamma_map_id is None:
            raise ValueError("mapent requires gamma or a gamma map")
        return self

    @property
    def number_of_updates(self) -> int:
        return self.n_subsets * self.n_iterations

    @property
    def beta(self) -> Optional[float]:
        """Prior weight beta = 1/gamma (derived, never set)"""
        return 1.0 / self.gamma if self.gamma else None


@dataclass
class UpdateStats:
    """Counters accumulated across updates"""
    guarded_bins: int = 0
    clamp_events: int = 0


@dataclass(frozen=True, eq=False)
class ReconResult:
    """Outcome of a reconstruction run"""
    final: Volume
    params: ReconParams
    snapshots: List[Tuple[int, Volume]] = field(default_factory=list)
    loglik_trace: List[Tuple[int, float]] = field(default_factory=list)
    scale: float = 1.0
    subset_order: List[int] = field(default_factory=list)
    guarded_bins: int = 0
    clamp_events: int = 0
    masked_voxels: int = 0

    @property
    def number_of_updates(self) -> int:
        return self.params.number_of_updates

    @property
    def beta(self) -> Optional[float]:
        return self.params.beta

    def summary(self) -> dict:
        return {
            "params": self.params.model_dump(mode="json"),
            "number_of_updates": self.number_of_updates,
            "beta": self.beta,
            "subset_order": self.subset_order,
            "guarded_bins": self.guarded_bins,
            "clamp_events": self.clamp_events,
            "masked_voxels": self.masked_voxels,
            "scale": self.scale,
            "snapshot_iterations": [it for it, _ in self.snapshots],
            "loglik_trace": [[k, value] for k, value in self.loglik_trace],
        }
