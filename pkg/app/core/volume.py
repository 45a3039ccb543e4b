"""
Shared geometric and array types: voxel grids, volumes and projection sets.

Arrays are stored with shape (nz, ny, nx) for volumes and (n_views, det_v, det_u)
for projections, C-ordered, so the flattened order is x-fastest (u-fastest).
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import config
from app.core.error_handlers import (
    ErrorMessages,
    GridMismatchError,
    InvalidParameterError,
    create_error,
)

logger = logging.getLogger(__name__)

EPS_NORM = 1e-30


class VolumeRole(str, Enum):
    """What a volume's values mean"""
    ACTIVITY = "activity"
    ATTENUATION = "attenuation"
    SENSITIVITY = "sensitivity"
    GAMMA = "gamma"
    LABELS = "labels"
    MASK = "mask"
    GENERIC = "generic"


NONNEGATIVE_ROLES = {VolumeRole.ACTIVITY, VolumeRole.ATTENUATION, VolumeRole.SENSITIVITY}


class Grid3(BaseModel):
    """Isotropic voxel lattice; origin is the world position (mm) of voxel (0,0,0)'s center"""

    model_config = ConfigDict(frozen=True)

    nx: int = Field(..., ge=1, description="Voxel count along x")
    ny: int = Field(..., ge=1, description="Voxel count along y")
    nz: int = Field(..., ge=1, description="Voxel count along z")
    pitch: float = Field(default=config.DEFAULT_PITCH_MM, gt=0, description="Voxel edge length (mm)")
    origin: Tuple[float, float, float] = Field(
        default=None,
        description="World position of voxel (0,0,0) center (mm); defaults to a grid centered on 0",
    )

    @model_validator(mode="before")
    @classmethod
    def _center_origin(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("origin") is None:
            data = dict(data)
            pitch = float(data.get("pitch", config.DEFAULT_PITCH_MM))
            data["origin"] = tuple(
                -pitch * (int(data[axis]) - 1) / 2.0 for axis in ("nx", "ny", "nz")
            )
        return data

    @property
    def shape(self) -> Tuple[int, int, int]:
        """Array shape (nz, ny, nx)"""
        return (self.nz, self.ny, self.nx)

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + self.pitch * (np.array([self.nx, self.ny, self.nz]) - 1) / 2.0

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Outer faces of the lattice (mm), lower and upper corner"""
        lo = np.asarray(self.origin) - self.pitch / 2.0
        hi = lo + self.pitch * np.array([self.nx, self.ny, self.nz])
        return lo, hi

    def axis_coordinates(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-center coordinates (mm) along x, y, z"""
        ox, oy, oz = self.origin
        return (
            ox + self.pitch * np.arange(self.nx),
            oy + self.pitch * np.arange(self.ny),
            oz + self.pitch * np.arange(self.nz),
        )

    def voxel_center(self, i: int, j: int, k: int) -> np.ndarray:
        return voxel_center(self, i, j, k)

    def index_of(self, position: Sequence[float]) -> Tuple[int, int, int]:
        return index_of(self, position)


def voxel_center(grid: Grid3, i: int, j: int, k: int) -> np.ndarray:
    """World position (mm) of voxel (i, j, k) = origin + pitch * (i, j, k)"""
    for value, n in ((i, grid.nx), (j, grid.ny), (k, grid.nz)):
        if not (0 <= value < n):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INDEX_OUT_OF_RANGE.format(index=(i, j, k), shape=(grid.nx, grid.ny, grid.nz)),
                field="index",
            )
    return np.asarray(grid.origin, dtype=float) + grid.pitch * np.array([i, j, k], dtype=float)


def index_of(grid: Grid3, position: Sequence[float]) -> Tuple[int, int, int]:
    """Nearest voxel (i, j, k) to a world position"""
    frac = (np.asarray(position, dtype=float) - np.asarray(grid.origin)) / grid.pitch
    idx = np.rint(frac).astype(int)
    if np.any(idx < 0) or np.any(idx >= np.array([grid.nx, grid.ny, grid.nz])):
        raise create_error(
            InvalidParameterError,
            ErrorMessages.POSITION_OUT_OF_RANGE.format(position=tuple(position)),
            field="position",
        )
    return int(idx[0]), int(idx[1]), int(idx[2])


def _check_same_grid(a: Grid3, b: Grid3) -> None:
    if a != b:
        raise create_error(
            GridMismatchError,
            ErrorMessages.GRID_MISMATCH.format(left=a.model_dump(), right=b.model_dump()),
        )


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar field on a Grid3; values has shape grid.shape and is read-only"""

    grid: Grid3
    values: np.ndarray
    role: VolumeRole = VolumeRole.GENERIC
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.size != self.grid.n_voxels:
            raise create_error(
                GridMismatchError,
                ErrorMessages.GRID_MISMATCH.format(left=values.shape, right=self.grid.shape),
                field="values",
            )
        values = values.reshape(self.grid.shape)
        if self.role in NONNEGATIVE_ROLES:
            if not np.all(np.isfinite(values)) or np.any(values < 0):
                raise create_error(
                    InvalidParameterError,
                    ErrorMessages.INVALID_PARAMETER_VALUE.format(
                        param=f"{self.role.value} volume", reason="values must be finite and >= 0"
                    ),
                    field="values",
                )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid3, role: VolumeRole = VolumeRole.GENERIC) -> "Volume":
        return cls(grid, np.zeros(grid.shape), role)

    @classmethod
    def full(cls, grid: Grid3, value: float, role: VolumeRole = VolumeRole.GENERIC) -> "Volume":
        return cls(grid, np.full(grid.shape, float(value)), role)

    def with_values(self, values: np.ndarray, role: Optional[VolumeRole] = None, **metadata) -> "Volume":
        merged = {**self.metadata, **metadata}
        return Volume(self.grid, values, role or self.role, merged)

    def total(self) -> float:
        return float(self.values.sum())

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.ravel()))

    def linear(self) -> np.ndarray:
        """Values in x-fastest linear order"""
        return self.values.ravel(order="C")


def add(a: Volume, b: Volume) -> Volume:
    _check_same_grid(a.grid, b.grid)
    return Volume(a.grid, a.values + b.values, a.role if a.role == b.role else VolumeRole.GENERIC)


def scale(a: Volume, factor: float) -> Volume:
    role = a.role if factor >= 0 else VolumeRole.GENERIC
    return Volume(a.grid, a.values * factor, role)


def hadamard(a: Volume, b: Volume) -> Volume:
    _check_same_grid(a.grid, b.grid)
    return Volume(a.grid, a.values * b.values, a.role if a.role == b.role else VolumeRole.GENERIC)


def l2_rel_diff(a: Volume, b: Volume, symmetric: bool = False, eps_norm: float = EPS_NORM) -> float:
    """
    Relative L2 difference

    Default: ||a - b|| / max(||b||, eps_norm).
    symmetric=True: 2 ||a - b|| / max(||a|| + ||b||, eps_norm).
    """
    _check_same_grid(a.grid, b.grid)
    diff = float(np.linalg.norm((a.values - b.values).ravel()))
    if symmetric:
        return 2.0 * diff / max(a.norm() + b.norm(), eps_norm)
    return diff / max(b.norm(), eps_norm)


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    """Per-view detector arrays; data has shape (n_views, det_v, det_u)"""

    angles: Tuple[float, ...]
    det_u: int
    det_v: int
    pixel_pitch: float
    data: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        data = np.array(self.data, dtype=np.float64, copy=True)
        expected = (len(angles), self.det_v, self.det_u)
        if data.size != int(np.prod(expected)):
            raise create_error(
                GridMismatchError,
                ErrorMessages.GRID_MISMATCH.format(left=data.shape, right=expected),
                field="data",
            )
        data = data.reshape(expected)
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(param="projections", reason="values must be finite and >= 0"),
                field="data",
            )
        if len(angles) > 1 and np.any(np.diff(angles) <= 0):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(param="angles", reason="must be strictly increasing"),
                field="angles",
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_views(self) -> int:
        return len(self.angles)

    def total(self) -> float:
        return float(self.data.sum())

    def with_data(self, data: np.ndarray, **metadata) -> "ProjectionSet":
        merged = {**self.metadata, **metadata}
        return ProjectionSet(self.angles, self.det_u, self.det_v, self.pixel_pitch, data, merged)
