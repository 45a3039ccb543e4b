from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import config
from app.core.error_handlers import ConfigError, ErrorMessages, create_error
from app.core.volume import Grid3
from app.features.noise.noise_schema import NoiseConfig
from app.features.phantom.phantom_schema import PhantomBuildRequest, PhantomSpec
from app.features.postfilter.postfilter_schema import FilterParams
from app.features.projector.projector_schema import AcquisitionGeometry
from app.features.recon.recon_schema import Algorithm, InitMode, ReconParams

# Reduced study used by --fast: 8 mm voxels keep the 300 mm body inside the field
FAST_GRID = {"nx": 64, "ny": 64, "nz": 46, "pitch": 8.0}
FAST_VIEWS = 60
FAST_COUNTS = 5e5

STAGES = ("phantom", "project", "addnoise", "reconstruct", "filter", "analyze", "report")


class GridSpec(BaseModel):
    """Reconstruction lattice; the origin is always centered"""
    model_config = ConfigDict(extra="forbid")

    nx: int = Field(default=128, ge=1)
    ny: int = Field(default=128, ge=1)
    nz: int = Field(default=92, ge=1)
    pitch: float = Field(default=config.DEFAULT_PITCH_MM, gt=0)

    def to_grid(self) -> Grid3:
        return Grid3(nx=self.nx, ny=self.ny, nz=self.nz, pitch=self.pitch)


class GammaRegionSource(str, Enum):
    """Where local-gamma regions come from"""
    MASKS = "masks"                # analytic sphere masks
    SEGMENTATION = "segmentation"  # thresholded OSEM pre-reconstruction


class GammaRegion(BaseModel):
    diameter_mm: float = Field(..., gt=0, description="Sphere whose region gets this gamma")
    gamma: float = Field(..., gt=0)


class SegmentationSettings(BaseModel):
    """OSEM pre-reconstruction and thresholding used to find lesion regions"""
    n_iterations: int = Field(default=2, ge=1)
    n_subsets: int = Field(default=10, ge=1)
    threshold_frac: float = Field(default=0.5, gt=0, lt=1)
    background_factor: float = Field(
        default=1.5, gt=0, description="Background level = factor x scaled background activity"
    )


class ReconVariant(BaseModel):
    """One reconstruction of the study"""
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., pattern=r"^[A-Za-z0-9_.\-]+$")
    algorithm: Algorithm
    n_iterations: int = Field(default=4, ge=1)
    n_subsets: int = Field(default=1, ge=1)
    gamma: Optional[float] = Field(default=None, gt=0, description="Global gamma, or the default of a gamma map")
    gamma_regions: List[GammaRegion] = Field(default_factory=list)
    gamma_region_source: GammaRegionSource = Field(default=GammaRegionSource.MASKS)
    segmentation: SegmentationSettings = Field(default_factory=SegmentationSettings)
    filtered: bool = Field(default=False, description="Also analyze Butterworth-filtered snapshots")
    snapshot_every: int = Field(default=1, ge=0)
    init: InitMode = Field(default=InitMode.UNIFORM_SCALED)

    @model_validator(mode="after")
    def _check_gamma(self) -> "ReconVariant":
        if self.gamma_regions and self.algorithm != Algorithm.MAPENT:
            raise ValueError("gamma_regions only apply to mapent variants")
        if self.algorithm == Algorithm.MAPENT and self.gamma is None:
            raise ValueError("mapent variants need gamma (the global value or the gamma-map default)")
        if self.algorithm != Algorithm.OSEM and self.n_subsets != 1:
            raise ValueError(f"n_subsets must be 1 for {self.algorithm.value}")
        return self

    @property
    def uses_gamma_map(self) -> bool:
        return bool(self.gamma_regions)

    @property
    def gamma_id(self) -> str:
        if self.uses_gamma_map:
            return f"map:{self.name}"
        return repr(self.gamma) if self.gamma is not None else ""

    def to_params(self) -> ReconParams:
        return ReconParams(
            algorithm=self.algorithm,
            n_iterations=self.n_iterations,
            n_subsets=self.n_subsets,
            gamma=self.gamma,
            gamma_map_id=self.gamma_id if self.uses_gamma_map else None,
            init=self.init,
            snapshot_every=self.snapshot_every,
        )


class ReportSettings(BaseModel):
    formats: List[str] = Field(default_factory=lambda: ["csv", "svg", "png"])
    rc_window: List[float] = Field(default_factory=lambda: [0.9, 1.1], min_length=2, max_length=2)
    local_gamma_window: List[float] = Field(default_factory=lambda: [0.85, 1.15], min_length=2, max_length=2)
    profile_diameters: List[float] = Field(
        default_factory=lambda: [13.0, 37.0, 28.0],
        description="Profiles run along x through these spheres' centers; the default crosses every sphere row",
    )


class StudyConfig(BaseModel):
    """Complete study description, read from one JSON or TOML file"""
    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="nema-study")
    grid: GridSpec = Field(default_factory=GridSpec)
    phantom: PhantomBuildRequest = Field(default_factory=PhantomBuildRequest)
    geometry: AcquisitionGeometry = Field(default_factory=AcquisitionGeometry)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    variants: List[ReconVariant] = Field(..., min_length=1)
    filter: FilterParams = Field(default_factory=FilterParams)
    report: ReportSettings = Field(default_factory=ReportSettings)
    output_dir: str = Field(default=config.OUTPUT_DIR)

    @model_validator(mode="after")
    def _unique_variants(self) -> "StudyConfig":
        names = [v.name for v in self.variants]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"variant names must be unique, repeated: {duplicates}")
        return self

    @model_validator(mode="after")
    def _orbit_clears_body(self) -> "StudyConfig":
        # presets share the default body
        body = self.phantom.spec if self.phantom.spec is not None else PhantomSpec()
        if self.geometry.rotation_radius <= body.transaxial_radius:
            raise ValueError(
                f"geometry.rotation_radius ({self.geometry.rotation_radius} mm) must exceed the phantom "
                f"radius ({body.transaxial_radius} mm)"
            )
        return self

    def fast(self) -> "StudyConfig":
        """Reduced-scale copy for quick runs"""
        return self.model_copy(
            update={
                "grid": GridSpec(**FAST_GRID),
                "geometry": self.geometry.model_copy(update={"n_views": FAST_VIEWS}),
                "noise": self.noise.model_copy(update={"target_total_counts": FAST_COUNTS}),
            }
        )

    def variant(self, name: str) -> ReconVariant:
        for v in self.variants:
            if v.name == name:
                return v
        raise create_error(
            ConfigError,
            ErrorMessages.UNKNOWN_VARIANT.format(name=name, known=[v.name for v in self.variants]),
            field="variant",
        )
