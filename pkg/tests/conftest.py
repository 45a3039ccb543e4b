import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.core.volume import Grid3, Volume, VolumeRole  # noqa: E402
from app.features.phantom.phantom_schema import PhantomSpec  # noqa: E402
from app.features.projector.projector_schema import AcquisitionGeometry  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow study-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid16():
    return Grid3(nx=16, ny=16, nz=8, pitch=4.0)


@pytest.fixture
def grid32():
    return Grid3(nx=32, ny=32, nz=16, pitch=4.0)


@pytest.fixture
def geometry12():
    return AcquisitionGeometry(n_views=12)


def disk_mask(grid: Grid3, margin: int = 2) -> np.ndarray:
    """Voxels inside the cylinder inscribed in the transaxial square, shape (nz, ny, nx)"""
    c = (grid.nx - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(grid.ny), np.arange(grid.nx), indexing="ij")
    inside = (ii - c) ** 2 + (jj - c) ** 2 <= (grid.nx / 2.0 - margin) ** 2
    return np.broadcast_to(inside, grid.shape)


def random_volume(grid: Grid3, rng, role=VolumeRole.ACTIVITY, in_fov: bool = True) -> Volume:
    values = rng.uniform(0.5, 1.5, grid.shape)
    if in_fov:
        values = np.where(disk_mask(grid), values, 0.0)
    return Volume(grid, values, role)


def make_mini_phantom_spec() -> PhantomSpec:
    """Two spheres and a lung insert that fit a 24x24x12 grid at 8 mm"""
    return PhantomSpec(
        sphere_diameters=[30.0, 24.0],
        sphere_angles_deg=[180.0, 0.0],
        ring_diameter=60.0,
        lung_diameter=20.0,
        body_semi_axes=(80.0, 60.0),
    )


def make_mini_study() -> dict:
    """Miniature study: every stage and variant kind in seconds"""
    return {
        "name": "mini",
        "grid": {"nx": 24, "ny": 24, "nz": 12, "pitch": 8.0},
        "phantom": {"spec": make_mini_phantom_spec().model_dump(mode="json")},
        "geometry": {"n_views": 12, "view_weighting": "normalized"},
        "noise": {"target_total_counts": 20000.0, "seed": 7},
        "variants": [
            {"name": "osem", "algorithm": "osem", "n_iterations": 2, "n_subsets": 3, "filtered": True},
            {"name": "mlem", "algorithm": "mlem", "n_iterations": 3, "snapshot_every": 0},
            {"name": "mapent_g0.1", "algorithm": "mapent", "n_iterations": 3, "gamma": 0.1},
            {
                "name": "mapent_local",
                "algorithm": "mapent",
                "n_iterations": 2,
                "gamma": 0.1,
                "gamma_regions": [{"diameter_mm": 24.0, "gamma": 0.15}],
            },
        ],
        "report": {"profile_diameters": [30.0]},
    }


@pytest.fixture
def mini_phantom_spec():
    return make_mini_phantom_spec()


@pytest.fixture
def mini_study_dict():
    return make_mini_study()


@pytest.fixture
def mini_study_file(tmp_path, mini_study_dict):
    path = tmp_path / "study.json"
    path.write_text(json.dumps(mini_study_dict, indent=2))
    return path
