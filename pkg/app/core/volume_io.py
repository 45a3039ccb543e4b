"""
Volume and projection file format.

Each object is two files sharing a stem: `<stem>.raw` holds little-endian float32
values in x-fastest (u-fastest) linear order, `<stem>.json` the sidecar with
dimensions, geometry, role, a SHA-256 checksum of the raw bytes and free metadata.
"""
from pathlib import Path
from typing import Any, Dict, Tuple, Union
import json
import logging

import numpy as np

from app.core.error_handlers import ChecksumError, ErrorMessages, create_error
from app.core.volume import Grid3, ProjectionSet, Volume, VolumeRole
from app.utils.hashing import sha256_bytes

logger = logging.getLogger(__name__)

RAW_DTYPE = "<f4"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def _stem(path: PathLike) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        return path.with_suffix("")
    return path


def _with(stem: Path, suffix: str) -> Path:
    # stems may contain dots (e.g. gamma values), so never use with_suffix here
    return stem.parent / (stem.name + suffix)


def _write_pair(stem: Path, array: np.ndarray, sidecar: Dict[str, Any]) -> Tuple[Path, Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(array, dtype=RAW_DTYPE).tobytes(order="C")
    raw_path = _with(stem, ".raw")
    json_path = _with(stem, ".json")
    raw_path.write_bytes(raw)
    sidecar = {
        **sidecar,
        "format_version": FORMAT_VERSION,
        "dtype": RAW_DTYPE,
        "order": "x-fastest",
        "data_file": raw_path.name,
        "checksum": sha256_bytes(raw),
    }
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return raw_path, json_path


def _read_pair(stem: Path) -> Tuple[np.ndarray, Dict[str, Any]]:
    json_path = _with(stem, ".json")
    if not json_path.exists():
        raise FileNotFoundError(2, "No such file", str(json_path))
    sidecar = json.loads(json_path.read_text())
    raw_path = json_path.parent / sidecar.get("data_file", _with(stem, ".raw").name)
    raw = raw_path.read_bytes()
    if sha256_bytes(raw) != sidecar.get("checksum"):
        raise create_error(ChecksumError, ErrorMessages.CHECKSUM_MISMATCH.format(path=raw_path))
    array = np.frombuffer(raw, dtype=sidecar.get("dtype", RAW_DTYPE)).astype(np.float64)
    return array, sidecar


def write_volume(path: PathLike, volume: Volume, **metadata) -> Tuple[Path, Path]:
    """Write a volume; extra keyword metadata is merged over volume.metadata"""
    sidecar = {
        "kind": "volume",
        "dims": [volume.grid.nx, volume.grid.ny, volume.grid.nz],
        "pitch": volume.grid.pitch,
        "origin": list(volume.grid.origin),
        "role": volume.role.value,
        "metadata": {**volume.metadata, **metadata},
    }
    paths = _write_pair(_stem(path), volume.values, sidecar)
    logger.info(f"Wrote {volume.role.value} volume to {paths[1]}")
    return paths


def read_volume(path: PathLike) -> Volume:
    array, sidecar = _read_pair(_stem(path))
    nx, ny, nz = sidecar["dims"]
    grid = Grid3(nx=nx, ny=ny, nz=nz, pitch=sidecar["pitch"], origin=tuple(sidecar["origin"]))
    return Volume(grid, array.reshape(grid.shape), VolumeRole(sidecar["role"]), sidecar.get("metadata", {}))


def write_projections(path: PathLike, proj: ProjectionSet, **metadata) -> Tuple[Path, Path]:
    sidecar = {
        "kind": "projections",
        "n_views": proj.n_views,
        "det_u": proj.det_u,
        "det_v": proj.det_v,
        "pixel_pitch": proj.pixel_pitch,
        "angles": list(proj.angles),
        "metadata": {**proj.metadata, **metadata},
    }
    paths = _write_pair(_stem(path), proj.data, sidecar)
    logger.info(f"Wrote {proj.n_views}-view projections to {paths[1]}")
    return paths


def read_projections(path: PathLike) -> ProjectionSet:
    array, sidecar = _read_pair(_stem(path))
    return ProjectionSet(
        angles=tuple(sidecar["angles"]),
        det_u=sidecar["det_u"],
        det_v=sidecar["det_v"],
        pixel_pitch=sidecar["pixel_pitch"],
        data=array,
        metadata=sidecar.get("metadata", {}),
    )


def sidecar_path(path: PathLike) -> Path:
    return _with(_stem(path), ".json")


def data_path(path: PathLike) -> Path:
    return _with(_stem(path), ".raw")
