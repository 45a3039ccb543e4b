import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from app.core.error_handlers import (
    ErrorMessages,
    InvalidParameterError,
    PhantomExtentError,
    create_error,
)
from app.core.volume import Grid3, Volume, VolumeRole
from app.core.volume_io import write_volume
from .phantom_schema import (
    THREE_SPHERE_DIAMETERS_MM,
    PhantomPreset,
    PhantomSpec,
)

logger = logging.getLogger(__name__)


class PhantomService:
    """Builds the voxelized NEMA IEC digital twin: activity, attenuation and sphere ROIs"""

    def default_nema_spec(self) -> PhantomSpec:
        """Six spheres (37..10 mm), activities sphere 100 / background 10 / lung 0, lung 51 mm"""
        return PhantomSpec()

    def three_sphere_variant(self, spec: PhantomSpec) -> PhantomSpec:
        """Only the 17, 13 and 10 mm spheres enabled; geometry unchanged"""
        enabled = [
            any(abs(d - keep) < 1e-9 for keep in THREE_SPHERE_DIAMETERS_MM)
            for d in spec.sphere_diameters
        ]
        return spec.model_copy(update={"spheres_enabled": enabled})

    def with_contrast(self, spec: PhantomSpec, ratio: float) -> PhantomSpec:
        """Rescale sphere activity so that sphere/background equals ratio"""
        if not ratio > 0:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.NON_POSITIVE.format(param="contrast"),
                field="contrast",
            )
        return spec.model_copy(update={"sphere_activity": spec.background_activity * ratio})

    def preset(self, name: PhantomPreset) -> PhantomSpec:
        spec = self.default_nema_spec()
        if PhantomPreset(name) == PhantomPreset.NEMA_3:
            spec = self.three_sphere_variant(spec)
        return spec

    def sphere_index(self, spec: PhantomSpec, diameter: float) -> int:
        for i, d in enumerate(spec.sphere_diameters):
            if abs(d - diameter) < 1e-9:
                return i
        raise create_error(
            InvalidParameterError,
            ErrorMessages.INVALID_PARAMETER_VALUE.format(
                param="diameter", reason=f"no sphere of {diameter} mm in {spec.sphere_diameters}"
            ),
            field="diameter",
        )

    def check_extent(self, spec: PhantomSpec, grid: Grid3) -> None:
        """Raise PhantomExtentError listing every part of the phantom outside the grid"""
        lo, hi = grid.bounds()
        cx, cy, cz = spec.body_center
        a, b = spec.body_semi_axes
        violations: List[Dict] = []

        def _check(name: str, part_lo: np.ndarray, part_hi: np.ndarray, axes=(0, 1, 2)):
            for axis in axes:
                if part_lo[axis] < lo[axis] - 1e-9 or part_hi[axis] > hi[axis] + 1e-9:
                    violations.append({
                        "part": name,
                        "axis": "xyz"[axis],
                        "part_extent_mm": [float(part_lo[axis]), float(part_hi[axis])],
                        "grid_extent_mm": [float(lo[axis]), float(hi[axis])],
                    })

        body_lo = np.array([cx - a, cy - b, cz - (spec.body_height or 0.0) / 2.0])
        body_hi = np.array([cx + a, cy + b, cz + (spec.body_height or 0.0) / 2.0])
        _check("body", body_lo, body_hi, axes=(0, 1, 2) if spec.body_height else (0, 1))

        for d, center in zip(spec.sphere_diameters, spec.sphere_centers):
            c = np.asarray(center, dtype=float)
            _check(f"sphere {d:g} mm", c - d / 2.0, c + d / 2.0)

        if violations:
            raise create_error(
                PhantomExtentError,
                ErrorMessages.PHANTOM_EXCEEDS_GRID.format(violations=len(violations)),
                details=violations,
            )

    def _sample_offsets(self, spec: PhantomSpec, grid: Grid3) -> np.ndarray:
        s = spec.subsamples
        return ((np.arange(s) + 0.5) / s - 0.5) * grid.pitch

    def _classify(self, spec: PhantomSpec, X, Y, Z) -> Tuple[np.ndarray, np.ndarray]:
        """Activity and attenuation at points; precedence spheres > lung > body > outside"""
        cx, cy, cz = spec.body_center
        a, b = spec.body_semi_axes
        body = ((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2 <= 1.0
        if spec.body_height is not None:
            body = body & (np.abs(Z - cz) <= spec.body_height / 2.0)
        lung = body & ((X - cx) ** 2 + (Y - cy) ** 2 <= (spec.lung_diameter / 2.0) ** 2)

        activity = np.where(body, spec.background_activity, 0.0)
        activity = np.where(lung, spec.lung_activity, activity)
        mu = np.where(body & ~lung, spec.mu_water, spec.mu_air)

        for i in spec.enabled_indices():
            sx, sy, sz = spec.sphere_centers[i]
            r = spec.sphere_diameters[i] / 2.0
            inside = (X - sx) ** 2 + (Y - sy) ** 2 + (Z - sz) ** 2 <= r * r
            activity = np.where(inside, spec.sphere_activity, activity)
            mu = np.where(inside, spec.mu_water, mu)
        return activity, mu

    def build_phantom(self, spec: PhantomSpec, grid: Grid3) -> Tuple[Volume, Volume]:
        """
        Voxelize the phantom

        Args:
            spec: Phantom description
            grid: Target lattice

        Returns:
            (activity, attenuation) volumes
        """
        self.check_extent(spec, grid)
        xs, ys, zs = grid.axis_coordinates()
        offsets = self._sample_offsets(spec, grid)

        activity = np.zeros(grid.shape)
        mu = np.zeros(grid.shape)
        for oz in offsets:
            for oy in offsets:
                for ox in offsets:
                    a, m = self._classify(
                        spec,
                        (xs + ox)[None, None, :],
                        (ys + oy)[None, :, None],
                        (zs + oz)[:, None, None],
                    )
                    activity += a
                    mu += m
        n_samples = len(offsets) ** 3
        if n_samples > 1:
            activity /= n_samples
            mu /= n_samples

        logger.info(
            f"Built phantom on {grid.nx}x{grid.ny}x{grid.nz} grid: "
            f"{len(spec.enabled_indices())} spheres enabled, total activity {activity.sum():.6g}"
        )
        return (
            Volume(grid, activity, VolumeRole.ACTIVITY, {"contrast": spec.contrast}),
            Volume(grid, mu, VolumeRole.ATTENUATION, {"units": "mm^-1"}),
        )

    def sphere_mask(self, spec: PhantomSpec, index: int, grid: Grid3) -> Volume:
        """Binary mask of the analytic sphere (center-point test); independent of spheres_enabled"""
        if not (0 <= index < spec.n_spheres):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(
                    param="index", reason=f"sphere id must be in [0, {spec.n_spheres})"
                ),
                field="index",
            )
        xs, ys, zs = grid.axis_coordinates()
        sx, sy, sz = spec.sphere_centers[index]
        r = spec.sphere_diameters[index] / 2.0
        inside = (
            (xs[None, None, :] - sx) ** 2 + (ys[None, :, None] - sy) ** 2 + (zs[:, None, None] - sz) ** 2
            <= r * r
        )
        return Volume(grid, inside.astype(float), VolumeRole.MASK, {"diameter_mm": spec.sphere_diameters[index]})

    def sphere_masks(self, spec: PhantomSpec, grid: Grid3, enabled_only: bool = True) -> Dict[float, Volume]:
        """Masks keyed by diameter (mm)"""
        indices = spec.enabled_indices() if enabled_only else range(spec.n_spheres)
        return {spec.sphere_diameters[i]: self.sphere_mask(spec, i, grid) for i in indices}

    def run_stage(self, spec: PhantomSpec, grid: Grid3, out_dir: Path) -> List[Path]:
        """Write activity, attenuation and phantom_spec.json into out_dir"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        activity, attenuation = self.build_phantom(spec, grid)
        paths = list(write_volume(out_dir / "activity", activity))
        paths += list(write_volume(out_dir / "attenuation", attenuation))
        spec_path = out_dir / "phantom_spec.json"
        spec_path.write_text(spec.model_dump_json(indent=2))
        paths.append(spec_path)
        return paths


# Create a singleton instance
phantom_service = PhantomService()

default_nema_spec = phantom_service.default_nema_spec
build_phantom = phantom_service.build_phantom
sphere_mask = phantom_service.sphere_mask
sphere_masks = phantom_service.sphere_masks
three_sphere_variant = phantom_service.three_sphere_variant
with_contrast = phantom_service.with_contrast
