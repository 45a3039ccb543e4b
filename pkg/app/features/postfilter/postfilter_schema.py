from enum import Enum

from pydantic import BaseModel, Field


class PadMode(str, Enum):
    """Boundary handling of the discrete transform"""
    PERIODIC = "periodic"  # plain DFT, exact DC and impulse response
    ZERO = "zero"          # zero-pad, filter, crop


class FilterParams(BaseModel):
    """3-D radial Butterworth low-pass"""
    order: float = Field(default=8.0, ge=1, description="Butterworth order p")
    cutoff: float = Field(default=0.048, gt=0, description="Cutoff frequency (cycles/mm)")
    enabled: bool = Field(default=True)
    pad_mode: PadMode = Field(default=PadMode.PERIODIC)
    pad_voxels: int = Field(default=0, ge=0, description="Zero padding per side when pad_mode is zero")
