from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class ViewWeighting(str, Enum):
    """Per-view scaling of the system matrix"""
    UNIT = "unit"    # every view has unit column sums
    DWELL = "dwell"  # each view weighted 1/n_views: a_ij is a per-acquisition detection probability
    NORMALIZED = "normalized"  # one constant for all views: mean body sensitivity equals mean_sensitivity


class PSFModel(BaseModel):
    """Depth-dependent Gaussian collimator-detector response, sigma(d) = sigma0 + slope * d"""

    model_config = ConfigDict(frozen=True)

    sigma0: float = Field(default=1.7, ge=0, description="Gaussian sigma at the collimator face (mm)")
    slope: float = Field(default=0.02, ge=0, description="Sigma growth per mm of source distance")


class AcquisitionGeometry(BaseModel):
    """Circular-orbit SPECT acquisition"""

    model_config = ConfigDict(frozen=True)

    n_views: int = Field(default=120, ge=1)
    arc_degrees: float = Field(default=360.0, gt=0, le=360.0)
    start_angle: float = Field(default=0.0, description="Angle of the first view (degrees)")
    det_u: Optional[int] = Field(default=None, ge=1, description="Detector columns; defaults to grid nx")
    det_v: Optional[int] = Field(default=None, ge=1, description="Detector rows; defaults to grid nz")
    pixel_pitch: Optional[float] = Field(default=None, gt=0, description="mm; defaults to voxel pitch")
    rotation_radius: float = Field(default=250.0, gt=0, description="Collimator face to rotation axis (mm)")
    psf: PSFModel = Field(default_factory=PSFModel)
    attenuation_on: bool = Field(default=True)
    psf_on: bool = Field(default=True)
    view_weighting: ViewWeighting = Field(default=ViewWeighting.UNIT)
    mean_sensitivity: float = Field(
        default=10.0,
        gt=0,
        description="Normalized weighting only: mean full-orbit sensitivity over the attenuating body",
    )

    @property
    def angular_step(self) -> float:
        return self.arc_degrees / self.n_views

    def angles(self) -> Tuple[float, ...]:
        """View angles (degrees), strictly increasing"""
        return tuple(float(self.start_angle + k * self.angular_step) for k in range(self.n_views))

    def view_weight(self) -> float:
        """Per-view factor before normalization; the normalized constant needs the attenuation map"""
        return 1.0 / self.n_views if self.view_weighting == ViewWeighting.DWELL else 1.0


class SubsetScheme(BaseModel):
    """Partition of view indices into ordered subsets"""

    model_config = ConfigDict(frozen=True)

    n_subsets: int = Field(..., ge=1)
    assignment: List[int] = Field(..., description="Subset id of each view")

    @model_validator(mode="after")
    def _check_partition(self) -> "SubsetScheme":
        if any(b < 0 or b >= self.n_subsets for b in self.assignment):
            raise ValueError("subset ids must lie in [0, n_subsets)")
        sizes = np.bincount(np.asarray(self.assignment, dtype=int), minlength=self.n_subsets)
        if sizes.min() == 0 or sizes.max() - sizes.min() > 1:
            raise ValueError(f"subset sizes must be non-empty and differ by at most 1, got {sizes.tolist()}")
        return self

    @property
    def n_views(self) -> int:
        return len(self.assignment)

    def views(self, b: int) -> List[int]:
        return [v for v, s in enumerate(self.assignment) if s == b]
