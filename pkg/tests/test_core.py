import json

import numpy as np
import pytest

from app.core.error_handlers import ChecksumError, GridMismatchError, InvalidParameterError
from app.core.volume import (
    Grid3,
    ProjectionSet,
    Volume,
    VolumeRole,
    add,
    hadamard,
    index_of,
    l2_rel_diff,
    scale,
    voxel_center,
)
from app.core.volume_io import (
    data_path,
    read_projections,
    read_volume,
    sidecar_path,
    write_projections,
    write_volume,
)
from app.utils.hashing import canonical_hash, canonical_json


@pytest.mark.parametrize(
    "grid, index, expected",
    [
        (Grid3(nx=4, ny=4, nz=4, pitch=4.0, origin=(0, 0, 0)), (0, 0, 0), (0, 0, 0)),
        (Grid3(nx=4, ny=4, nz=4, pitch=4.0, origin=(0, 0, 0)), (1, 2, 3), (4, 8, 12)),
        (Grid3(nx=11, ny=11, nz=11, pitch=2.0, origin=(-10, -10, -10)), (10, 10, 10), (10, 10, 10)),
    ],
)
def test_voxel_center(grid, index, expected):
    np.testing.assert_allclose(voxel_center(grid, *index), expected)


def test_voxel_center_out_of_range(grid16):
    with pytest.raises(InvalidParameterError):
        voxel_center(grid16, 16, 0, 0)
    with pytest.raises(InvalidParameterError):
        voxel_center(grid16, 0, -1, 0)


def test_default_origin_is_centered():
    grid = Grid3(nx=128, ny=128, nz=92, pitch=4.0)
    np.testing.assert_allclose(grid.center, (0.0, 0.0, 0.0))
    lo, hi = grid.bounds()
    np.testing.assert_allclose(lo, (-256.0, -256.0, -184.0))
    np.testing.assert_allclose(hi, (256.0, 256.0, 184.0))


def test_index_of_inverts_voxel_center(grid16):
    for index in [(0, 0, 0), (3, 7, 5), (15, 15, 7)]:
        assert index_of(grid16, voxel_center(grid16, *index)) == index
    with pytest.raises(InvalidParameterError):
        index_of(grid16, (1000.0, 0.0, 0.0))


def test_l2_rel_diff_examples(grid16, rng):
    b = Volume(grid16, rng.uniform(0.1, 1.0, grid16.shape))
    assert l2_rel_diff(b, b) == 0.0
    assert l2_rel_diff(scale(b, 2.0), b) == pytest.approx(1.0, rel=1e-12)


def test_l2_rel_diff_matches_elementwise_sum(grid16, rng):
    a = Volume(grid16, rng.normal(size=grid16.shape))
    b = Volume(grid16, rng.normal(size=grid16.shape))
    num = 0.0
    den = 0.0
    for x, y in zip(a.values.ravel().tolist(), b.values.ravel().tolist()):
        num += (x - y) ** 2
        den += y * y
    assert l2_rel_diff(a, b) == pytest.approx((num / den) ** 0.5, rel=1e-12)
    sym = l2_rel_diff(a, b, symmetric=True)
    assert sym == pytest.approx(2 * num ** 0.5 / (a.norm() + b.norm()), rel=1e-12)


def test_l2_rel_diff_zero_reference_is_guarded(grid16):
    a = Volume.full(grid16, 1.0)
    assert np.isfinite(l2_rel_diff(a, Volume.zeros(grid16)))


def test_grid_mismatch_raises(grid16, grid32):
    with pytest.raises(GridMismatchError):
        add(Volume.zeros(grid16), Volume.zeros(grid32))
    with pytest.raises(GridMismatchError):
        l2_rel_diff(Volume.zeros(grid16), Volume.zeros(grid32))


def test_volume_arithmetic(grid16, rng):
    a = Volume(grid16, rng.uniform(size=grid16.shape), VolumeRole.ACTIVITY)
    b = Volume(grid16, rng.uniform(size=grid16.shape), VolumeRole.ACTIVITY)
    np.testing.assert_array_equal(add(a, b).values, a.values + b.values)
    np.testing.assert_array_equal(hadamard(a, b).values, a.values * b.values)
    assert scale(a, -1.0).role == VolumeRole.GENERIC
    assert add(a, Volume(grid16, b.values)).role == VolumeRole.GENERIC


def test_volume_is_read_only_and_validated(grid16):
    vol = Volume.full(grid16, 1.0, VolumeRole.ACTIVITY)
    with pytest.raises(ValueError):
        vol.values[0, 0, 0] = 5.0
    with pytest.raises(InvalidParameterError):
        Volume(grid16, -np.ones(grid16.shape), VolumeRole.ACTIVITY)
    with pytest.raises(GridMismatchError):
        Volume(grid16, np.ones(10))


def test_linear_order_is_x_fastest(grid16):
    values = np.zeros(grid16.shape)
    values[0, 0, 1] = 1.0
    assert np.argmax(Volume(grid16, values).linear()) == 1


def test_projection_set_validation():
    with pytest.raises(InvalidParameterError):
        ProjectionSet(angles=(0.0, 0.0), det_u=2, det_v=2, pixel_pitch=4.0, data=np.zeros((2, 2, 2)))
    with pytest.raises(InvalidParameterError):
        ProjectionSet(angles=(0.0,), det_u=2, det_v=2, pixel_pitch=4.0, data=-np.ones((1, 2, 2)))


def test_volume_file_roundtrip(tmp_path, grid16, rng):
    vol = Volume(grid16, rng.uniform(size=grid16.shape).astype(np.float32), VolumeRole.ACTIVITY, {"tag": "x"})
    write_volume(tmp_path / "mapent_g0.1", vol, iteration=3)
    assert data_path(tmp_path / "mapent_g0.1").name == "mapent_g0.1.raw"
    back = read_volume(tmp_path / "mapent_g0.1")
    assert back.grid == grid16
    assert back.role == VolumeRole.ACTIVITY
    assert back.metadata == {"tag": "x", "iteration": 3}
    np.testing.assert_array_equal(back.values, vol.values)


def test_projection_file_roundtrip(tmp_path):
    proj = ProjectionSet(
        angles=(0.0, 90.0), det_u=3, det_v=2, pixel_pitch=4.0, data=np.arange(12, dtype=float).reshape(2, 2, 3)
    )
    write_projections(tmp_path / "p", proj, seed=5)
    back = read_projections(tmp_path / "p.json")
    assert back.angles == (0.0, 90.0)
    assert back.metadata["seed"] == 5
    np.testing.assert_array_equal(back.data, proj.data)
    assert json.loads(sidecar_path(tmp_path / "p").read_text())["order"] == "x-fastest"


def test_corrupted_raw_is_rejected(tmp_path, grid16):
    write_volume(tmp_path / "v", Volume.full(grid16, 1.0))
    raw = data_path(tmp_path / "v")
    payload = bytearray(raw.read_bytes())
    payload[0] ^= 0xFF
    raw.write_bytes(bytes(payload))
    with pytest.raises(ChecksumError):
        read_volume(tmp_path / "v")


def test_missing_volume_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "absent")


def test_canonical_hash_ignores_key_order():
    assert canonical_json({"b": 1, "a": [1, 2]}) == canonical_json({"a": [1, 2], "b": 1})
    assert canonical_hash({"b": 1, "a": 2}) == canonical_hash({"a": 2, "b": 1})
    assert canonical_hash({"a": 1}) != canonical_hash({"a": 2})
