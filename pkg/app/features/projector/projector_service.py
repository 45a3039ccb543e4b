"""
Rotation-based matrix-free SPECT projector.

For each view the volume is carried into a detector-aligned frame whose y axis points
at the collimator (rows closer to the detector have larger index). Per view:

    forward:  splat-rotate  ->  x attenuation factors  ->  Gaussian blur per depth plane  ->  sum planes
    back:     copy to planes ->  Gaussian blur per plane ->  x attenuation factors  ->  transposed rotation

Rotation is a sparse bilinear splatting operator R (column sums 1 inside the frame), the
blur is a symmetric correlation with zero boundaries, so backprojection is the exact
transpose of forward.
"""
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy import sparse
from scipy.ndimage import correlate1d, map_coordinates

from app.core.config import config
from app.core.error_handlers import (
    ErrorMessages,
    GridMismatchError,
    InvalidParameterError,
    create_error,
)
from app.core.volume import Grid3, ProjectionSet, Volume, VolumeRole
from app.core.volume_io import read_volume, write_projections
from .projector_schema import AcquisitionGeometry, SubsetScheme, ViewWeighting

logger = logging.getLogger(__name__)

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
_SNAP = 1e-9


def psf_sigma(geometry: AcquisitionGeometry, distance: float) -> float:
    """Gaussian sigma (mm) at source-to-collimator distance (mm)"""
    if distance < 0:
        raise create_error(
            InvalidParameterError,
            ErrorMessages.INVALID_PARAMETER_VALUE.format(param="distance", reason="must be >= 0"),
            field="distance",
        )
    return geometry.psf.sigma0 + geometry.psf.slope * distance


def psf_kernel(sigma_mm: float, pixel_pitch: float) -> np.ndarray:
    """1-D Gaussian truncated at 3 sigma and renormalized to unit sum"""
    s = sigma_mm / pixel_pitch
    radius = int(math.floor(3.0 * s)) if s > 0 else 0
    if radius == 0:
        return np.ones(1)
    x = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (x / s) ** 2)
    return w / w.sum()


def _snap(a: np.ndarray) -> np.ndarray:
    r = np.rint(a)
    return np.where(np.abs(a - r) < _SNAP, r, a)


def ray_attenuation(attenuation: Volume, index: Tuple[int, int, int], angle_deg: float) -> float:
    """
    Survival factor exp(-sum mu * dl) from a voxel center toward the detector of a view

    The emitting voxel contributes half a pitch, every further step of one pitch along the
    detector normal contributes a full pitch; samples are trilinear and stop at the grid edge.
    """
    grid = attenuation.grid
    i, j, k = index
    grid.voxel_center(i, j, k)  # range check
    theta = math.radians(angle_deg)
    di, dj = -math.sin(theta), math.cos(theta)

    n_steps = int(math.ceil(math.hypot(grid.nx, grid.ny))) + 1
    t = np.arange(1, n_steps + 1, dtype=float)
    xi = _snap(i + t * di)
    yj = _snap(j + t * dj)
    inside = (xi >= 0) & (xi <= grid.nx - 1) & (yj >= 0) & (yj <= grid.ny - 1)
    xi, yj = xi[inside], yj[inside]
    coords = np.vstack([np.full(xi.shape, float(k)), yj, xi])
    samples = map_coordinates(attenuation.values, coords, order=1, mode="constant", cval=0.0)
    line = 0.5 * attenuation.values[k, j, i] + samples.sum()
    return float(math.exp(-grid.pitch * line))


def interleaved_subsets(n_views: int, n_subsets: int) -> SubsetScheme:
    """View v goes to subset v mod n_subsets, giving each subset maximal angular spread"""
    if n_subsets < 1 or n_subsets > n_views:
        raise create_error(
            InvalidParameterError,
            ErrorMessages.PARAMETER_OUT_OF_RANGE.format(param="n_subsets", min_val=1, max_val=n_views),
            details={"provided_value": n_subsets},
            field="n_subsets",
        )
    return SubsetScheme(n_subsets=n_subsets, assignment=[v % n_subsets for v in range(n_views)])


class SpectProjector:
    """Projector context bound to one grid, geometry and attenuation map; caches per-view operators"""

    def __init__(
        self,
        grid: Grid3,
        geometry: AcquisitionGeometry,
        attenuation: Optional[Volume] = None,
        threads: Optional[int] = None,
    ):
        if grid.nx != grid.ny:
            raise create_error(
                GridMismatchError,
                ErrorMessages.GRID_MISMATCH.format(left=f"nx={grid.nx}", right=f"ny={grid.ny} (transaxial grid must be square)"),
            )
        det_u = geometry.det_u or grid.nx
        det_v = geometry.det_v or grid.nz
        pixel_pitch = geometry.pixel_pitch or grid.pitch
        if det_u != grid.nx or det_v != grid.nz or abs(pixel_pitch - grid.pitch) > 1e-12:
            raise create_error(
                GridMismatchError,
                ErrorMessages.DETECTOR_MISMATCH.format(
                    detector=(det_u, det_v, pixel_pitch), grid=(grid.nx, grid.nz, grid.pitch)
                ),
            )
        if attenuation is not None and attenuation.grid != grid:
            raise create_error(
                GridMismatchError,
                ErrorMessages.GRID_MISMATCH.format(left=attenuation.grid.model_dump(), right=grid.model_dump()),
                field="attenuation",
            )

        self.grid = grid
        self.geometry = geometry
        self.angles = geometry.angles()
        self.n_views = geometry.n_views
        self.det_u, self.det_v, self.pixel_pitch = det_u, det_v, pixel_pitch
        self.threads = max(1, threads or config.THREADS)
        self.weight = geometry.view_weight()
        self._mu = attenuation.values if (attenuation is not None and geometry.attenuation_on) else None

        self._rotations: Dict[int, sparse.csr_matrix] = {}
        self._att_cache: Dict[int, np.ndarray] = {}
        self._sensitivity: Dict[Tuple[int, ...], np.ndarray] = {}
        view_bytes = grid.n_voxels * 8
        self._cache_attenuation = view_bytes * self.n_views <= config.PROJECTOR_CACHE_MB * 1024 * 1024
        self._kernels = self._build_kernels() if geometry.psf_on else None
        body = attenuation.values > 0 if attenuation is not None else None
        if body is not None:
            self._check_orbit(body)
        if geometry.view_weighting == ViewWeighting.NORMALIZED:
            self.weight = self._normalizing_weight(body)

    def _check_orbit(self, body: np.ndarray) -> None:
        """The collimator face must stay outside the attenuating object on every view"""
        if not body.any():
            return
        c = (self.grid.nx - 1) / 2.0
        jj, ii = np.nonzero(body.any(axis=0))
        extent = float(np.hypot(ii - c, jj - c).max() + math.sqrt(0.5)) * self.grid.pitch
        if self.geometry.rotation_radius <= extent:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.ORBIT_INSIDE_OBJECT.format(radius=self.geometry.rotation_radius, extent=round(extent, 3)),
                details={"rotation_radius": self.geometry.rotation_radius, "object_radius": extent},
                field="rotation_radius",
            )

    def _normalizing_weight(self, body: Optional[np.ndarray]) -> float:
        """Constant view weight giving mean full-orbit sensitivity geometry.mean_sensitivity over the body"""
        self.weight = 1.0
        raw = self.sensitivity()
        self._sensitivity.clear()
        region = body if body is not None and body.any() else raw > 0
        mean = float(raw[region].mean()) if region.any() else 0.0
        if not mean > 0:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(param="view_weighting", reason="no voxel is seen by any view"),
                field="view_weighting",
            )
        weight = self.geometry.mean_sensitivity / mean
        logger.info(f"Normalized view weight {weight:.6g} (raw mean body sensitivity {mean:.6g})")
        return weight

    # -- per-view building blocks -------------------------------------------------

    def plane_distances(self) -> np.ndarray:
        """Collimator distance (mm) of each detector-frame row, clamped at 0"""
        rows = (np.arange(self.grid.ny) - (self.grid.ny - 1) / 2.0) * self.grid.pitch
        return np.maximum(self.geometry.rotation_radius - rows, 0.0)

    def _build_kernels(self) -> List[np.ndarray]:
        return [psf_kernel(psf_sigma(self.geometry, d), self.pixel_pitch) for d in self.plane_distances()]

    def rotation_operator(self, view: int) -> sparse.csr_matrix:
        """Sparse (ny*nx, ny*nx) bilinear splatting from the object frame into the detector frame"""
        op = self._rotations.get(view)
        if op is not None:
            return op
        n = self.grid.nx
        c = (n - 1) / 2.0
        theta = math.radians(self.angles[view])
        cos_t, sin_t = math.cos(theta), math.sin(theta)

        jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        xs, ys = ii.ravel() - c, jj.ravel() - c
        src = np.arange(n * n)
        col_f = _snap(xs * cos_t + ys * sin_t + c)
        row_f = _snap(-xs * sin_t + ys * cos_t + c)
        c0, r0 = np.floor(col_f).astype(int), np.floor(row_f).astype(int)
        fc, fr = col_f - c0, row_f - r0

        rows, cols, data = [], [], []
        for dr, wr in ((0, 1.0 - fr), (1, fr)):
            for dc, wc in ((0, 1.0 - fc), (1, fc)):
                w = wr * wc
                rr, cc = r0 + dr, c0 + dc
                ok = (w > 0) & (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
                rows.append(rr[ok] * n + cc[ok])
                cols.append(src[ok])
                data.append(w[ok])
        op = sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
        ).tocsr()
        self._rotations[view] = op
        return op

    def attenuation_factors(self, view: int) -> Optional[np.ndarray]:
        """exp(-line integral) toward the detector for every detector-frame voxel, or None"""
        if self._mu is None:
            return None
        cached = self._att_cache.get(view)
        if cached is not None:
            return cached
        nz, n = self.grid.nz, self.grid.nx
        c = (n - 1) / 2.0
        theta = math.radians(self.angles[view])
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        rr, cc = np.meshgrid(np.arange(n) - c, np.arange(n) - c, indexing="ij")
        src_x = _snap(cc * cos_t - rr * sin_t + c)
        src_y = _snap(cc * sin_t + rr * cos_t + c)
        coords = np.empty((3, nz, n, n))
        coords[0] = np.arange(nz)[:, None, None]
        coords[1] = src_y[None]
        coords[2] = src_x[None]
        mu_r = map_coordinates(self._mu, coords, order=1, mode="constant", cval=0.0)
        beyond = np.flip(np.cumsum(np.flip(mu_r, axis=1), axis=1), axis=1)
        factors = np.exp(-self.grid.pitch * (beyond - 0.5 * mu_r))
        if self._cache_attenuation:
            self._att_cache[view] = factors
        return factors

    def _blur(self, plane: np.ndarray, row: int) -> np.ndarray:
        k = self._kernels[row]
        if k.size == 1:
            return plane.copy()
        out = correlate1d(plane, k, axis=0, mode="constant", cval=0.0)
        return correlate1d(out, k, axis=1, mode="constant", cval=0.0)

    def _forward_view(self, values: np.ndarray, view: int) -> np.ndarray:
        nz, ny, nx = self.grid.shape
        rot = (self.rotation_operator(view) @ values.reshape(nz, ny * nx).T).T.reshape(nz, ny, nx)
        factors = self.attenuation_factors(view)
        if factors is not None:
            rot = rot * factors
        if self._kernels is None:
            out = rot.sum(axis=1)
        else:
            out = np.zeros((nz, nx))
            for row in range(ny):
                plane = rot[:, row, :]
                if plane.any():
                    out += self._blur(plane, row)
        return out * self.weight if self.weight != 1.0 else out

    def _back_view(self, data: np.ndarray, view: int) -> np.ndarray:
        nz, ny, nx = self.grid.shape
        if self._kernels is None:
            rot = np.repeat(data[:, None, :], ny, axis=1)
        else:
            rot = np.empty((nz, ny, nx))
            for row in range(ny):
                rot[:, row, :] = self._blur(data, row)
        factors = self.attenuation_factors(view)
        if factors is not None:
            rot = rot * factors
        back = (self.rotation_operator(view).T @ rot.reshape(nz, ny * nx).T).T
        return back * self.weight if self.weight != 1.0 else back

    def _map_views(self, fn: Callable[[int], np.ndarray], views: Sequence[int]) -> Iterator[Tuple[int, np.ndarray]]:
        """Yield (view, result) in the given view order, computing chunks in parallel"""
        if self.threads == 1 or len(views) <= 1:
            for v in views:
                yield v, fn(v)
            return
        chunk = self.threads * 2
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            for start in range(0, len(views), chunk):
                block = list(views[start:start + chunk])
                for v, result in zip(block, pool.map(fn, block)):
                    yield v, result

    def _views(self, views: Optional[Iterable[int]]) -> List[int]:
        if views is None:
            return list(range(self.n_views))
        views = sorted(int(v) for v in views)
        if views and (views[0] < 0 or views[-1] >= self.n_views):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.PARAMETER_OUT_OF_RANGE.format(param="view", min_val=0, max_val=self.n_views - 1),
                field="subset",
            )
        return views

    # -- public operators ---------------------------------------------------------

    def forward(self, values: np.ndarray, views: Optional[Iterable[int]] = None) -> np.ndarray:
        """Mean projections (n_views, det_v, det_u); views outside the selection stay zero"""
        values = np.asarray(values, dtype=np.float64).reshape(self.grid.shape)
        out = np.zeros((self.n_views, self.det_v, self.det_u))
        for v, proj in self._map_views(lambda v: self._forward_view(values, v), self._views(views)):
            out[v] = proj
        return out

    def backproject(self, data: np.ndarray, views: Optional[Iterable[int]] = None) -> np.ndarray:
        """Transpose of forward restricted to the selected views; returns grid-shaped array"""
        data = np.asarray(data, dtype=np.float64).reshape(self.n_views, self.det_v, self.det_u)
        nz, ny, nx = self.grid.shape
        acc = np.zeros((nz, ny * nx))
        for _, contrib in self._map_views(lambda v: self._back_view(data[v], v), self._views(views)):
            acc += contrib
        return acc.reshape(self.grid.shape)

    def sensitivity(self, views: Optional[Iterable[int]] = None) -> np.ndarray:
        """Backprojection of unit projections over the selected views (cached)"""
        key = tuple(self._views(views))
        cached = self._sensitivity.get(key)
        if cached is None:
            ones = np.zeros((self.n_views, self.det_v, self.det_u))
            ones[list(key)] = 1.0
            cached = self.backproject(ones, key)
            cached.setflags(write=False)
            self._sensitivity[key] = cached
        return cached

    def projection_set(self, data: np.ndarray, **metadata) -> ProjectionSet:
        return ProjectionSet(
            angles=self.angles,
            det_u=self.det_u,
            det_v=self.det_v,
            pixel_pitch=self.pixel_pitch,
            data=data,
            metadata={"geometry": self.geometry.model_dump(mode="json"), "grid": self.grid.model_dump(mode="json"), **metadata},
        )


def explicit_system_matrix(
    projector: SpectProjector, views: Optional[Iterable[int]] = None, force: bool = False
) -> np.ndarray:
    """
    Dense system matrix built column by column from unit impulses

    Rows follow the flattened (view, v, u) projection order, columns the x-fastest voxel order.
    Refused above EXPLICIT_MATRIX_MAX_VOXELS unless force=True.
    """
    n_vox = projector.grid.n_voxels
    if n_vox > config.EXPLICIT_MATRIX_MAX_VOXELS and not force:
        raise create_error(
            InvalidParameterError,
            ErrorMessages.PARAMETER_OUT_OF_RANGE.format(
                param="n_voxels", min_val=1, max_val=config.EXPLICIT_MATRIX_MAX_VOXELS
            ),
            details={"provided_value": n_vox},
        )
    views = projector._views(views)
    n_bins = projector.n_views * projector.det_v * projector.det_u
    matrix = np.zeros((n_bins, n_vox))
    impulse = np.zeros(n_vox)
    for j in range(n_vox):
        impulse[j] = 1.0
        matrix[:, j] = projector.forward(impulse, views).ravel()
        impulse[j] = 0.0
    return matrix


def _projector_for(grid: Grid3, attenuation: Optional[Volume], geometry: AcquisitionGeometry) -> SpectProjector:
    return SpectProjector(grid, geometry, attenuation)


def forward(
    activity: Volume,
    attenuation: Optional[Volume],
    geometry: AcquisitionGeometry,
    subset: Optional[Iterable[int]] = None,
) -> ProjectionSet:
    """Mean projections of an activity volume (views outside subset are zero)"""
    projector = _projector_for(activity.grid, attenuation, geometry)
    return projector.projection_set(projector.forward(activity.values, subset))


def backproject(
    proj: ProjectionSet,
    attenuation: Optional[Volume],
    geometry: AcquisitionGeometry,
    subset: Optional[Iterable[int]] = None,
    grid: Optional[Grid3] = None,
) -> Volume:
    grid = grid or (attenuation.grid if attenuation is not None else None)
    if grid is None:
        raise create_error(InvalidParameterError, "backproject needs a grid when no attenuation volume is given", field="grid")
    projector = _projector_for(grid, attenuation, geometry)
    if proj.n_views != projector.n_views:
        raise create_error(
            GridMismatchError,
            ErrorMessages.GRID_MISMATCH.format(left=f"{proj.n_views} views", right=f"{projector.n_views} views"),
        )
    return Volume(grid, projector.backproject(proj.data, subset), VolumeRole.GENERIC)


def sensitivity(
    attenuation: Optional[Volume],
    geometry: AcquisitionGeometry,
    subset: Optional[Iterable[int]] = None,
    grid: Optional[Grid3] = None,
) -> Volume:
    grid = grid or (attenuation.grid if attenuation is not None else None)
    if grid is None:
        raise create_error(InvalidParameterError, "sensitivity needs a grid when no attenuation volume is given", field="grid")
    projector = _projector_for(grid, attenuation, geometry)
    return Volume(grid, projector.sensitivity(subset), VolumeRole.SENSITIVITY)


class ProjectorService:
    """Projection stage: phantom activity -> noiseless mean projections"""

    def run_stage(self, phantom_dir: Path, geometry: AcquisitionGeometry, out_dir: Path) -> List[Path]:
        phantom_dir, out_dir = Path(phantom_dir), Path(out_dir)
        activity = read_volume(phantom_dir / "activity")
        attenuation = read_volume(phantom_dir / "attenuation")
        logger.info(
            f"Projecting {activity.grid.nx}x{activity.grid.ny}x{activity.grid.nz} activity over "
            f"{geometry.n_views} views (psf={geometry.psf_on}, attenuation={geometry.attenuation_on})"
        )
        proj = forward(activity, attenuation, geometry)
        logger.info(f"Noiseless projections total {proj.total():.6g}")
        return list(write_projections(out_dir / "mean", proj))


# Create a singleton instance
projector_service = ProjectorService()
