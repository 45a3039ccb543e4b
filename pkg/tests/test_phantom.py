import json
import math

import numpy as np
import pytest

from app.core.error_handlers import InvalidParameterError, PhantomExtentError
from app.core.volume import Grid3
from app.core.volume_io import read_volume
from app.features.phantom.phantom_schema import PhantomPreset, PhantomSpec
from app.features.phantom.phantom_service import phantom_service

NEMA_GRID = Grid3(nx=128, ny=128, nz=92, pitch=4.0)


@pytest.fixture(scope="module")
def nema_volumes():
    return phantom_service.build_phantom(phantom_service.default_nema_spec(), NEMA_GRID)


def test_default_spec():
    spec = phantom_service.default_nema_spec()
    assert spec.sphere_activity == 100.0
    assert spec.background_activity == 10.0
    assert spec.lung_activity == 0.0
    assert spec.contrast == pytest.approx(10.0)
    assert spec.n_spheres == 6
    assert max(spec.sphere_diameters) == 37.0


def test_sphere_centers_on_ring():
    spec = phantom_service.default_nema_spec()
    for x, y, z in spec.sphere_centers:
        assert math.hypot(x, y) == pytest.approx(spec.ring_diameter / 2.0)
        assert z == spec.sphere_plane_z


def test_zero_activities_give_zero_volume(grid32):
    spec = PhantomSpec(
        sphere_activity=0.0,
        background_activity=0.0,
        body_semi_axes=(50.0, 40.0),
        ring_diameter=40.0,
        sphere_diameters=[10.0],
        sphere_angles_deg=[0.0],
        lung_diameter=8.0,
    )
    activity, _ = phantom_service.build_phantom(spec, grid32)
    assert not activity.values.any()


def test_sphere_voxel_count(nema_volumes):
    mask = phantom_service.sphere_mask(phantom_service.default_nema_spec(), 0, NEMA_GRID)
    expected = 4.0 / 3.0 * math.pi * 18.5 ** 3 / 64.0
    assert abs(mask.values.sum() - expected) <= 0.1 * expected


def test_activity_levels(nema_volumes):
    activity, attenuation = nema_volumes
    spec = phantom_service.default_nema_spec()
    assert activity.values.max() == 100.0
    center = NEMA_GRID.index_of((0.0, 0.0, 0.0))
    i, j, k = center
    assert activity.values[k, j, i] == 0.0
    assert set(np.unique(activity.values)) <= {0.0, 10.0, 100.0}
    assert set(np.unique(attenuation.values)) <= {spec.mu_air, spec.mu_water}
    # outside the body
    assert activity.values[k, j, 0] == 0.0


def test_build_is_deterministic(nema_volumes):
    activity, attenuation = phantom_service.build_phantom(phantom_service.default_nema_spec(), NEMA_GRID)
    np.testing.assert_array_equal(activity.values, nema_volumes[0].values)
    np.testing.assert_array_equal(attenuation.values, nema_volumes[1].values)


def test_masks_are_disjoint():
    spec = phantom_service.default_nema_spec()
    masks = phantom_service.sphere_masks(spec, NEMA_GRID)
    assert sorted(masks) == sorted(spec.sphere_diameters)
    assert not np.any((masks[37.0].values > 0) & (masks[10.0].values > 0))
    total = sum(m.values for m in masks.values())
    assert total.max() == 1.0


def test_bad_sphere_id():
    with pytest.raises(InvalidParameterError):
        phantom_service.sphere_mask(phantom_service.default_nema_spec(), 6, NEMA_GRID)


def test_three_sphere_variant():
    spec = phantom_service.preset(PhantomPreset.NEMA_3)
    enabled = [spec.sphere_diameters[i] for i in spec.enabled_indices()]
    assert sorted(enabled) == [10.0, 13.0, 17.0]
    activity, _ = phantom_service.build_phantom(spec, NEMA_GRID)
    big = phantom_service.sphere_mask(spec, 0, NEMA_GRID)
    full = phantom_service.sphere_mask(phantom_service.default_nema_spec(), 0, NEMA_GRID)
    # disabled sphere volume is background, its mask is unchanged
    assert activity.values[big.values > 0].max() == 10.0
    assert big.values.sum() == full.values.sum()
    assert len(phantom_service.sphere_masks(spec, NEMA_GRID, enabled_only=False)) == 6


def test_with_contrast():
    spec = phantom_service.with_contrast(phantom_service.default_nema_spec(), 4.0)
    assert spec.sphere_activity == 40.0
    assert spec.contrast == pytest.approx(4.0)
    with pytest.raises(InvalidParameterError):
        phantom_service.with_contrast(spec, 0.0)


def test_phantom_exceeding_grid_lists_violations():
    grid = Grid3(nx=32, ny=32, nz=16, pitch=4.0)
    with pytest.raises(PhantomExtentError) as exc:
        phantom_service.build_phantom(phantom_service.default_nema_spec(), grid)
    parts = {v["part"] for v in exc.value.details}
    assert "body" in parts
    assert all("grid_extent_mm" in v for v in exc.value.details)


def test_subsampling_gives_partial_volumes(grid32):
    spec = PhantomSpec(
        body_semi_axes=(50.0, 40.0),
        ring_diameter=40.0,
        sphere_diameters=[13.0],
        sphere_angles_deg=[0.0],
        lung_diameter=8.0,
        subsamples=4,
    )
    activity, _ = phantom_service.build_phantom(spec, grid32)
    values = np.unique(activity.values)
    assert np.any((values > 10.0) & (values < 100.0))


def test_mismatched_sphere_lists_rejected():
    with pytest.raises(ValueError):
        PhantomSpec(sphere_diameters=[10.0, 20.0], sphere_centers=[(0.0, 0.0, 0.0)])


def test_run_stage_writes_files(tmp_path, mini_phantom_spec):
    grid = Grid3(nx=24, ny=24, nz=12, pitch=8.0)
    phantom_service.run_stage(mini_phantom_spec, grid, tmp_path)
    activity = read_volume(tmp_path / "activity")
    assert activity.grid == grid
    assert activity.values.max() == 100.0
    spec = json.loads((tmp_path / "phantom_spec.json").read_text())
    assert spec["sphere_diameters"] == [30.0, 24.0]
