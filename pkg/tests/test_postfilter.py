import numpy as np
import pytest

from app.core.error_handlers import InvalidParameterError
from app.core.volume import Grid3, Volume, VolumeRole, l2_rel_diff
from app.core.volume_io import read_volume, write_volume
from app.features.postfilter.postfilter_schema import FilterParams, PadMode
from app.features.postfilter.postfilter_service import postfilter_service, radial_frequency

GRID = Grid3(nx=16, ny=16, nz=16, pitch=8.0)
NYQUIST = 1.0 / (2.0 * GRID.pitch)


def test_gain_examples():
    params = FilterParams(order=8, cutoff=0.048)
    assert postfilter_service.filter_gain(params, 0.0) == 1.0
    assert postfilter_service.filter_gain(params, 0.048) == pytest.approx(2 ** -0.5)
    sharp = FilterParams(order=200, cutoff=0.02)
    assert postfilter_service.filter_gain(sharp, 0.04) < 1e-12
    with pytest.raises(InvalidParameterError):
        postfilter_service.filter_gain(params, -0.1)


def test_constant_volume_unchanged():
    vol = Volume.full(GRID, 3.5, VolumeRole.ACTIVITY)
    out = postfilter_service.butterworth_3d(vol, FilterParams(cutoff=0.03))
    assert l2_rel_diff(out, vol) < 1e-10
    assert out.metadata["filter"]["cutoff"] == 0.03


def test_band_limited_volume_passes_at_nyquist(rng):
    z, y, x = np.meshgrid(*(np.arange(16) / 16.0,) * 3, indexing="ij")
    values = 10.0 + np.zeros(GRID.shape)
    for kz, ky, kx in [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (0, 1, 1)]:
        amplitude, phase = rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        values += amplitude * np.cos(2 * np.pi * (kz * z + ky * y + kx * x) + phase)
    vol = Volume(GRID, values)
    out = postfilter_service.butterworth_3d(vol, FilterParams(order=8, cutoff=NYQUIST))
    assert l2_rel_diff(out, vol) < 0.05


def test_cutoff_above_nyquist_rejected():
    with pytest.raises(InvalidParameterError):
        postfilter_service.butterworth_3d(Volume.zeros(GRID), FilterParams(cutoff=NYQUIST * 1.01))


def test_impulse_response_is_the_gain():
    values = np.zeros(GRID.shape)
    values[0, 0, 0] = 1.0
    params = FilterParams(order=8, cutoff=0.04)
    out = postfilter_service.butterworth_3d(Volume(GRID, values), params)
    spectrum = np.abs(np.fft.fftn(out.values))
    expected = postfilter_service.filter_gain(params, radial_frequency(GRID.shape, GRID.pitch))
    np.testing.assert_allclose(spectrum, expected, atol=1e-10)


def test_energy_never_increases(rng):
    grid = Grid3(nx=8, ny=8, nz=8, pitch=8.0)
    params = FilterParams(order=4, cutoff=0.04)
    for _ in range(100):
        vol = Volume(grid, rng.normal(size=grid.shape))
        assert postfilter_service.butterworth_3d(vol, params).norm() <= vol.norm() * (1 + 1e-12)


def test_mean_preserved_and_linear(rng):
    params = FilterParams(order=8, cutoff=0.048)
    a = Volume(GRID, rng.uniform(size=GRID.shape))
    b = Volume(GRID, rng.uniform(size=GRID.shape))
    fa = postfilter_service.butterworth_3d(a, params)
    fb = postfilter_service.butterworth_3d(b, params)
    assert fa.values.mean() == pytest.approx(a.values.mean(), rel=1e-12)
    combined = postfilter_service.butterworth_3d(Volume(GRID, 2 * a.values - b.values), params)
    np.testing.assert_allclose(combined.values, 2 * fa.values - fb.values, atol=1e-12)


def test_lower_cutoff_smooths_more(rng):
    vol = Volume(GRID, rng.uniform(size=GRID.shape))
    band = 0.02
    energies = [
        postfilter_service.high_frequency_energy(
            postfilter_service.butterworth_3d(vol, FilterParams(order=8, cutoff=c)), band
        )
        for c in (NYQUIST, 0.048, 0.03, 0.015)
    ]
    assert all(later <= earlier * (1 + 1e-12) for earlier, later in zip(energies, energies[1:]))
    assert energies[-1] < energies[0]


def test_disabled_filter_is_identity(rng):
    vol = Volume(GRID, rng.uniform(size=GRID.shape), VolumeRole.ACTIVITY)
    assert postfilter_service.butterworth_3d(vol, FilterParams(enabled=False)) is vol


def test_zero_padding_keeps_shape(rng):
    vol = Volume(GRID, rng.uniform(size=GRID.shape), VolumeRole.ACTIVITY)
    out = postfilter_service.butterworth_3d(vol, FilterParams(pad_mode=PadMode.ZERO, pad_voxels=4))
    assert out.values.shape == GRID.shape
    periodic = postfilter_service.butterworth_3d(vol, FilterParams())
    assert not np.allclose(out.values, periodic.values)


def test_negative_ringing_drops_activity_role():
    values = np.zeros(GRID.shape)
    values[4:12, 4:12, 4:12] = 100.0
    out = postfilter_service.butterworth_3d(Volume(GRID, values, VolumeRole.ACTIVITY), FilterParams(order=8, cutoff=0.02))
    assert out.values.min() < 0
    assert out.role == VolumeRole.GENERIC


def test_run_stage_filters_each_input(tmp_path, rng):
    for name in ("iter_001", "iter_002"):
        write_volume(tmp_path / "in" / name, Volume(GRID, rng.uniform(size=GRID.shape), VolumeRole.ACTIVITY))
    inputs = sorted((tmp_path / "in").glob("iter_*.json"))
    postfilter_service.run_stage(inputs, FilterParams(), tmp_path / "out")
    for name in ("iter_001", "iter_002"):
        assert "filter" in read_volume(tmp_path / "out" / name).metadata
