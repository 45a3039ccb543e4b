import json
import math

import numpy as np
import pytest

from app.core.error_handlers import InvalidParameterError, ZeroSensitivityError
from app.core.volume import Grid3, ProjectionSet, Volume, VolumeRole, l2_rel_diff
from app.core.volume_io import read_volume, write_projections, write_volume
from app.features.noise.noise_service import noise_service
from app.features.phantom.phantom_service import phantom_service
from app.features.projector.projector_schema import AcquisitionGeometry
from app.features.projector.projector_service import SpectProjector, interleaved_subsets
from app.features.recon.recon_schema import Algorithm, InitMode, ReconParams
from app.features.recon.recon_service import recon_service

from .conftest import disk_mask, random_volume


@pytest.fixture
def consistent_case(grid16, rng):
    """Projector, an in-field estimate and its exact projections"""
    geometry = AcquisitionGeometry(n_views=12)
    attenuation = Volume(grid16, np.where(disk_mask(grid16, 1), 0.0154, 0.0), VolumeRole.ATTENUATION)
    ctx = SpectProjector(grid16, geometry, attenuation)
    f = random_volume(grid16, rng)
    return ctx, f, ctx.projection_set(ctx.forward(f.values))


@pytest.fixture(scope="module")
def noisy_case():
    rng = np.random.default_rng(5)
    grid = Grid3(nx=32, ny=32, nz=16, pitch=4.0)
    geometry = AcquisitionGeometry(n_views=24)
    ctx = SpectProjector(grid, geometry)
    truth = random_volume(grid, rng)
    mean = ctx.projection_set(ctx.forward(truth.values))
    scaled, _ = noise_service.scale_to_counts(mean, 2e4)
    return ctx, noise_service.poisson_sample(scaled, seed=8)


def test_init_estimate(grid16):
    proj = ProjectionSet(angles=(0.0,), det_u=1, det_v=1, pixel_pitch=4.0, data=np.array([5e6]))
    ones = recon_service.init_estimate(grid16, proj, InitMode.UNIFORM_ONES)
    assert np.all(ones.values == 1.0)
    big = Grid3(nx=128, ny=128, nz=92, pitch=4.0)
    scaled = recon_service.init_estimate(big, proj, InitMode.UNIFORM_SCALED)
    assert scaled.values[0, 0, 0] == pytest.approx(5e6 / 1507328)
    assert scaled.values[0, 0, 0] == pytest.approx(3.318, abs=1e-3)


def test_mlem_fixed_point(consistent_case):
    ctx, f, proj = consistent_case
    updated = recon_service.mlem_update(f, proj, ctx)
    assert l2_rel_diff(updated, f) < 1e-12


def test_osem_fixed_point_on_every_subset(consistent_case):
    ctx, f, proj = consistent_case
    scheme = interleaved_subsets(ctx.n_views, 4)
    for b in range(4):
        assert l2_rel_diff(recon_service.osem_update(f, proj, scheme, b, ctx), f) < 1e-12


def test_mapent_fixed_point(consistent_case):
    ctx, f, proj = consistent_case
    assert l2_rel_diff(recon_service.mapent_update(f, proj, 0.1, ctx), f) < 1e-12


def test_zero_voxel_stays_zero(consistent_case):
    ctx, f, proj = consistent_case
    values = np.ones(ctx.grid.shape)
    values[4, 8, 8] = 0.0
    estimate = Volume(ctx.grid, values, VolumeRole.ACTIVITY)
    for _ in range(3):
        estimate = recon_service.mlem_update(estimate, proj, ctx)
        estimate = recon_service.mapent_update(estimate, proj, 0.05, ctx)
    assert estimate.values[4, 8, 8] == 0.0


def test_osem_single_subset_equals_mlem(consistent_case):
    ctx, _, proj = consistent_case
    mlem = recon_service.run(ReconParams(algorithm=Algorithm.MLEM, n_iterations=2), proj, ctx)
    osem = recon_service.run(ReconParams(algorithm=Algorithm.OSEM, n_iterations=2, n_subsets=1), proj, ctx)
    assert l2_rel_diff(osem.final, mlem.final) < 1e-12


def test_zero_sensitivity_with_positive_estimate(consistent_case):
    ctx, _, proj = consistent_case
    scheme = interleaved_subsets(ctx.n_views, 12)
    # the grid corner leaves the detector frame at 30 degrees
    with pytest.raises(ZeroSensitivityError):
        recon_service.osem_update(Volume.full(ctx.grid, 1.0, VolumeRole.ACTIVITY), proj, scheme, 1, ctx)


def test_run_masks_voxels_outside_field_of_view(consistent_case):
    ctx, _, proj = consistent_case
    result = recon_service.run(ReconParams(algorithm=Algorithm.OSEM, n_iterations=1, n_subsets=12), proj, ctx)
    assert result.masked_voxels > 0
    assert result.final.values[:, 0, 0].max() == 0.0


def test_mlem_loglik_is_monotone(noisy_case):
    ctx, counts = noisy_case
    params = ReconParams(algorithm=Algorithm.MLEM, n_iterations=50, snapshot_every=0, init=InitMode.UNIFORM_SCALED)
    result = recon_service.run(params, counts, ctx)
    values = np.array([v for _, v in result.loglik_trace])
    assert len(values) == 50
    assert np.all(np.diff(values) >= -1e-9)
    assert result.guarded_bins == 0


class _ConstantProjector:
    """Stands in for a projector whose forward projection is fixed"""

    def __init__(self, expected: np.ndarray):
        self.expected = expected

    def forward(self, values, views=None):
        return self.expected


def test_loglikelihood_closed_forms(grid16):
    proj = ProjectionSet(angles=(0.0, 90.0), det_u=4, det_v=3, pixel_pitch=4.0, data=np.ones((2, 3, 4)))
    estimate = Volume.full(grid16, 1.0, VolumeRole.ACTIVITY)
    assert recon_service.loglikelihood(estimate, proj, _ConstantProjector(np.ones((2, 3, 4)))) == pytest.approx(-24.0)

    expected = np.ones((2, 3, 4))
    expected[0, 0, 0] = 0.0
    assert recon_service.loglikelihood(estimate, proj, _ConstantProjector(expected)) == -math.inf

    zeros = proj.with_data(np.where(expected > 0, 1.0, 0.0))
    assert recon_service.loglikelihood(estimate, zeros, _ConstantProjector(expected)) == pytest.approx(-23.0)


def test_loglikelihood_against_direct_sum(consistent_case):
    ctx, f, proj = consistent_case
    direct = 0.0
    for g in proj.data.ravel().tolist():
        if g > 0:
            direct += g * math.log(g)
        direct -= g
    assert recon_service.loglikelihood(f, proj, ctx) == pytest.approx(direct, rel=1e-10)
    assert recon_service.loglikelihood(Volume.zeros(ctx.grid, VolumeRole.ACTIVITY), proj, ctx) == -math.inf


def test_mapent_rejects_non_positive_gamma(consistent_case):
    ctx, f, proj = consistent_case
    with pytest.raises(InvalidParameterError):
        recon_service.mapent_update(f, proj, 0.0, ctx)
    with pytest.raises(ValueError):
        ReconParams(algorithm=Algorithm.MAPENT, gamma=-0.1)


def test_mapent_exponent_clamp_is_counted(consistent_case):
    ctx, f, proj = consistent_case
    result = recon_service.run(
        ReconParams(algorithm=Algorithm.MAPENT, gamma=1e6, n_iterations=1, exponent_clamp=5.0), proj, ctx
    )
    assert result.clamp_events > 0
    assert np.all(np.isfinite(result.final.values))


def test_mapent_with_gamma_map(consistent_case):
    ctx, f, proj = consistent_case
    gamma = Volume.full(ctx.grid, 0.05, VolumeRole.GAMMA)
    start = Volume.full(ctx.grid, 1.0, VolumeRole.ACTIVITY).with_values(np.where(disk_mask(ctx.grid), 1.0, 0.0))
    by_map = recon_service.mapent_update(start, proj, gamma, ctx)
    by_scalar = recon_service.mapent_update(start, proj, 0.05, ctx)
    np.testing.assert_allclose(by_map.values, by_scalar.values, rtol=1e-14)


def test_update_counts_and_snapshots(consistent_case):
    ctx20 = SpectProjector(consistent_case[0].grid, AcquisitionGeometry(n_views=20))
    f = consistent_case[1]
    proj = ctx20.projection_set(ctx20.forward(f.values))

    mlem = recon_service.run(ReconParams(algorithm=Algorithm.MLEM, n_iterations=3, snapshot_every=0), proj, ctx20)
    assert mlem.snapshots == []
    assert mlem.final.metadata["iteration"] == 3

    osem = recon_service.run(ReconParams(algorithm=Algorithm.OSEM, n_iterations=4, n_subsets=10), proj, ctx20)
    assert osem.number_of_updates == 40
    assert len(osem.loglik_trace) == 40
    assert [it for it, _ in osem.snapshots] == [1, 2, 3, 4]
    assert osem.subset_order == list(range(10))


def test_rerun_is_bit_identical(consistent_case):
    ctx, _, proj = consistent_case
    params = ReconParams(algorithm=Algorithm.OSEM, n_iterations=2, n_subsets=3)
    a = recon_service.run(params, proj, ctx)
    b = recon_service.run(params, proj, ctx)
    np.testing.assert_array_equal(a.final.values, b.final.values)
    assert a.loglik_trace == b.loglik_trace


def test_params_validation():
    with pytest.raises(ValueError):
        ReconParams(algorithm=Algorithm.MLEM, n_subsets=4)
    with pytest.raises(ValueError):
        ReconParams(algorithm=Algorithm.MAPENT)
    params = ReconParams(algorithm=Algorithm.MAPENT, gamma=0.1)
    assert params.beta == pytest.approx(10.0)


def test_segment_uniform_volume(grid16):
    labels = recon_service.segment_lesions(Volume.full(grid16, 10.0, VolumeRole.ACTIVITY), 10.0, 0.5)
    assert labels.metadata["n_labels"] == 0
    assert not labels.values.any()


def test_segment_nema_truth():
    grid = Grid3(nx=128, ny=128, nz=92, pitch=4.0)
    spec = phantom_service.default_nema_spec()
    activity, _ = phantom_service.build_phantom(spec, grid)
    labels = recon_service.segment_lesions(activity, spec.background_activity, 0.5)
    assert labels.metadata["n_labels"] == 6
    masks = phantom_service.sphere_masks(spec, grid)
    found = {recon_service.label_for_mask(labels, m) for m in masks.values()}
    assert found == {1, 2, 3, 4, 5, 6}


def test_segment_rejects_bad_threshold(grid16):
    with pytest.raises(InvalidParameterError):
        recon_service.segment_lesions(Volume.zeros(grid16), 0.0, 1.0)


def test_gamma_map_from_masks():
    grid = Grid3(nx=128, ny=128, nz=92, pitch=4.0)
    masks = phantom_service.sphere_masks(phantom_service.default_nema_spec(), grid)
    gamma = recon_service.gamma_map_from_masks(masks, {22.0: 0.15, 17.0: 0.25}, 0.1, grid)
    assert sorted(np.unique(gamma.values).tolist()) == [0.1, 0.15, 0.25]
    assert np.all(gamma.values[masks[22.0].values > 0] == 0.15)

    flat = recon_service.gamma_map_from_masks(masks, {}, 0.1, grid)
    assert np.all(flat.values == 0.1)

    with pytest.raises(InvalidParameterError):
        recon_service.gamma_map_from_masks(masks, {22.0: 0.0}, 0.1, grid)
    with pytest.raises(InvalidParameterError):
        recon_service.gamma_map_from_masks(masks, {99.0: 0.2}, 0.1, grid)


def test_local_gamma():
    assert recon_service.local_gamma(0.1, 6, 9) == pytest.approx(0.15)
    assert recon_service.local_gamma(0.1, 4, 4) == pytest.approx(0.1)
    with pytest.raises(InvalidParameterError):
        recon_service.local_gamma(0.1, 0, 4)


def test_run_stage_writes_snapshots(tmp_path, consistent_case):
    ctx, f, _ = consistent_case
    attenuation = Volume(ctx.grid, np.where(disk_mask(ctx.grid, 1), 0.0154, 0.0), VolumeRole.ATTENUATION)
    counts = ctx.projection_set(ctx.forward(f.values), scale=2.5, seed=9)
    write_projections(tmp_path / "counts", counts)
    write_volume(tmp_path / "attenuation", attenuation)

    params = ReconParams(algorithm=Algorithm.OSEM, n_iterations=2, n_subsets=3)
    recon_service.run_stage(tmp_path / "counts", tmp_path / "attenuation", params, tmp_path / "recon")
    summary = json.loads((tmp_path / "recon" / "result.json").read_text())
    assert summary["number_of_updates"] == 6
    assert summary["scale"] == 2.5
    assert summary["seed"] == 9
    snapshot = read_volume(tmp_path / "recon" / "iter_002")
    assert snapshot.metadata["number_of_updates"] == 6
    assert snapshot.metadata["algorithm"] == "osem"


def test_mlem_preserves_total_counts(consistent_case):
    ctx, f, proj = consistent_case
    result = recon_service.run(
        ReconParams(algorithm=Algorithm.MLEM, n_iterations=5, init=InitMode.UNIFORM_SCALED), proj, ctx
    )
    assert ctx.forward(result.final.values).sum() == pytest.approx(proj.total(), rel=1e-3)
    assert result.final.values.min() >= 0.0


def test_segmented_labels_cover_only_hot_voxels(grid32):
    values = np.full(grid32.shape, 1.0)
    values[4:7, 4:7, 4:7] = 10.0
    values[5, 5, 5] = 12.0
    values[10:12, 20:23, 20:23] = 5.0
    prerecon = Volume(grid32, values, VolumeRole.ACTIVITY)
    labels = recon_service.segment_lesions(prerecon, 1.0, 0.5)
    assert labels.metadata["n_labels"] == 2
    assert set(np.unique(labels.values).tolist()) == {0.0, 1.0, 2.0}
    assert np.all(values[labels.values > 0] > 1.0)
    # the cube voxels at 10 exceed 1 + 0.5 * (12 - 1)
    assert np.count_nonzero(labels.values == labels.values[5, 5, 5]) == 27
