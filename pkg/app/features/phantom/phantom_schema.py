from enum import Enum
from typing import Any, List, Optional, Tuple
import math

from pydantic import BaseModel, ConfigDict, Field, model_validator

# Default NEMA IEC body phantom layout, largest sphere first
NEMA_SPHERE_DIAMETERS_MM = [37.0, 28.0, 22.0, 17.0, 13.0, 10.0]
NEMA_SPHERE_ANGLES_DEG = [180.0, 240.0, 300.0, 0.0, 60.0, 120.0]
NEMA_RING_DIAMETER_MM = 114.4
THREE_SPHERE_DIAMETERS_MM = (17.0, 13.0, 10.0)

# Narrow-beam linear attenuation of water at 140 keV
MU_WATER_140KEV = 0.0154


class PhantomPreset(str, Enum):
    """Available phantom presets"""
    NEMA_6 = "nema-6"
    NEMA_3 = "nema-3"


class PhantomSpec(BaseModel):
    """Parametric description of the NEMA IEC digital twin (lengths in mm, activities relative)"""

    model_config = ConfigDict(frozen=True)

    sphere_diameters: List[float] = Field(default_factory=lambda: list(NEMA_SPHERE_DIAMETERS_MM))
    sphere_angles_deg: List[float] = Field(
        default_factory=lambda: list(NEMA_SPHERE_ANGLES_DEG),
        description="Angular position of each sphere on the ring; used when sphere_centers is not given",
    )
    ring_diameter: float = Field(default=NEMA_RING_DIAMETER_MM, gt=0)
    sphere_plane_z: float = Field(default=0.0, description="World z of the common sphere plane")
    sphere_centers: List[Tuple[float, float, float]] = Field(default=None)
    spheres_enabled: List[bool] = Field(default=None)

    sphere_activity: float = Field(default=100.0, ge=0)
    background_activity: float = Field(default=10.0, ge=0)
    lung_diameter: float = Field(default=51.0, ge=0)
    lung_activity: float = Field(default=0.0, ge=0)

    body_semi_axes: Tuple[float, float] = Field(default=(150.0, 110.0), description="Elliptical cylinder semi-axes x, y")
    body_height: Optional[float] = Field(default=None, gt=0, description="None spans the full grid height")
    body_center: Tuple[float, float, float] = Field(default=(0.0, 0.0, 0.0))

    mu_water: float = Field(default=MU_WATER_140KEV, ge=0, description="mm^-1")
    mu_air: float = Field(default=0.0, ge=0, description="mm^-1")

    subsamples: int = Field(default=1, ge=1, le=8, description="Sub-voxel samples per axis; 1 = center-point test")

    @model_validator(mode="before")
    @classmethod
    def _fill_layout(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        diameters = data.get("sphere_diameters", NEMA_SPHERE_DIAMETERS_MM)
        if data.get("sphere_centers") is None:
            angles = data.get("sphere_angles_deg", NEMA_SPHERE_ANGLES_DEG)
            radius = float(data.get("ring_diameter", NEMA_RING_DIAMETER_MM)) / 2.0
            z = float(data.get("sphere_plane_z", 0.0))
            cx, cy, _ = data.get("body_center", (0.0, 0.0, 0.0))
            data["sphere_centers"] = [
                (cx + radius * math.cos(math.radians(a)), cy + radius * math.sin(math.radians(a)), z)
                for a in angles[: len(diameters)]
            ]
        if data.get("spheres_enabled") is None:
            data["spheres_enabled"] = [True] * len(diameters)
        return data

    @model_validator(mode="after")
    def _check_spheres(self) -> "PhantomSpec":
        n = len(self.sphere_diameters)
        if len(self.sphere_centers) != n or len(self.spheres_enabled) != n:
            raise ValueError(
                f"sphere_diameters ({n}), sphere_centers ({len(self.sphere_centers)}) and "
                f"spheres_enabled ({len(self.spheres_enabled)}) must have equal length"
            )
        if any(d <= 0 for d in self.sphere_diameters):
            raise ValueError("sphere diameters must be positive")
        return self

    @property
    def contrast(self) -> float:
        """Sphere-to-background activity ratio"""
        if self.background_activity == 0:
            return math.inf
        return self.sphere_activity / self.background_activity

    @property
    def transaxial_radius(self) -> float:
        """Largest distance (mm) of the body surface from the rotation axis"""
        return math.hypot(self.body_center[0], self.body_center[1]) + max(self.body_semi_axes)

    @property
    def n_spheres(self) -> int:
        return len(self.sphere_diameters)

    def enabled_indices(self) -> List[int]:
        return [i for i, on in enumerate(self.spheres_enabled) if on]


class PhantomBuildRequest(BaseModel):
    """Inputs of the phantom stage"""
    preset: PhantomPreset = Field(default=PhantomPreset.NEMA_6)
    contrast: Optional[float] = Field(default=None, gt=0, description="Overrides sphere/background ratio")
    spec: Optional[PhantomSpec] = Field(default=None, description="Explicit spec; wins over preset")
    subsamples: Optional[int] = Field(
        default=None, ge=1, le=8, description="Overrides PhantomSpec.subsamples (partial-volume voxelization)"
    )
