"""Unit tests for ray sampling, the rendering weight, compositing and the loss terms."""

from __future__ import annotations

import numpy as np
import pytest

from logic.neural_map import initialize_map
from logic.renderer import (
    LossTerms,
    PixelBatch,
    PixelRender,
    RayBatch,
    camera_directions,
    combine_losses,
    draw_samples,
    pixel_losses,
    render_image,
    render_weight,
    render_weight_grad,
    sample_along_ray,
    surface_mask,
    total_loss,
    volume_render,
)
from models.config import SlamConfig
from models.exceptions import ContractViolationError, EmptyStaticSetError
from tests.conftest import ROOM_MAX, ROOM_MIN, TINY_INTRINSICS


def _straight_ray(near: float = 0.1, far: float = 2.1) -> RayBatch:
    return RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), np.array([near]), np.array([far]))


# ============================================================================
# Rays and samples
# ============================================================================

@pytest.mark.unit
class TestCameraDirections:
    def test_principal_point_looks_down_z(self):
        pixel = int(TINY_INTRINSICS.cy) * TINY_INTRINSICS.width + int(TINY_INTRINSICS.cx)
        dirs, scale = camera_directions(TINY_INTRINSICS, np.array([pixel]))
        np.testing.assert_allclose(dirs[0], [0.0, 0.0, 1.0])
        assert scale[0] == pytest.approx(1.0)

    def test_directions_are_unit_and_scale_recovers_z(self, rng):
        pixels = rng.integers(0, TINY_INTRINSICS.width * TINY_INTRINSICS.height, size=20)
        dirs, scale = camera_directions(TINY_INTRINSICS, pixels)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
        np.testing.assert_allclose(dirs[:, 2] * scale, 1.0)


@pytest.mark.unit
class TestSampleAlongRay:
    def test_midpoints_without_rng(self):
        samples = sample_along_ray(_straight_ray(), None, 4, 0, 0.1, rng=None)
        np.testing.assert_allclose(samples.distances[0], [0.35, 0.85, 1.35, 1.85])
        assert samples.active.all()

    def test_depth_guided_midpoints_merge_sorted(self):
        samples = sample_along_ray(_straight_ray(), np.array([1.0]), 4, 2, 0.1, rng=None)
        np.testing.assert_allclose(samples.distances[0], [0.35, 0.85, 0.95, 1.05, 1.35, 1.85])

    def test_random_samples_stay_in_their_ranges(self, rng):
        rays = RayBatch(np.zeros((50, 3)), np.tile([0.0, 0.0, 1.0], (50, 1)), np.full(50, 0.1), np.full(50, 2.1))
        depth = rng.uniform(0.5, 1.8, size=50)
        samples = sample_along_ray(rays, depth, 8, 4, 0.1, rng=rng)
        assert samples.distances.min() >= 0.1 and samples.distances.max() <= 2.1
        assert np.all(np.diff(samples.distances, axis=1) >= 0)
        near_surface = np.abs(samples.distances - depth[:, None]) <= 0.1 + 1e-12
        assert np.all(near_surface.sum(axis=1) >= 4)

    def test_rays_without_depth_pad_inactive(self):
        samples = sample_along_ray(_straight_ray(), np.array([0.0]), 4, 3, 0.1, rng=None)
        assert samples.active.sum() == 4
        np.testing.assert_allclose(samples.distances[0, ~samples.active[0]], 2.1)

    def test_needs_two_samples(self):
        with pytest.raises(ContractViolationError):
            sample_along_ray(_straight_ray(), None, 1, 0, 0.1)


# ============================================================================
# Weights and compositing
# ============================================================================

@pytest.mark.unit
class TestRenderWeight:
    def test_peak_at_zero(self):
        assert render_weight(np.array(0.0), 0.01) == pytest.approx(0.25)

    def test_symmetric(self, rng):
        s = rng.uniform(-0.1, 0.1, size=20)
        np.testing.assert_allclose(render_weight(s, 0.02), render_weight(-s, 0.02))

    def test_one_bandwidth_out(self):
        assert render_weight(np.array(0.05), 0.05) == pytest.approx(0.19661193324148185, rel=1e-12)

    def test_gradient_vanishes_at_peak(self):
        assert render_weight_grad(np.array(0.0), 0.01) == pytest.approx(0.0)

    def test_rejects_non_positive_bandwidth(self):
        with pytest.raises(ContractViolationError):
            render_weight(np.zeros(1), 0.0)


@pytest.mark.unit
class TestSurfaceMask:
    def test_keeps_truncation_behind_first_crossing(self):
        sdf = np.array([[0.5, 0.3, 0.1, -0.1, -0.3, -0.5]])
        distances = np.array([[1.0, 1.1, 1.2, 1.3, 1.4, 1.5]])
        keep = surface_mask(sdf, distances, np.ones_like(sdf, dtype=bool), 0.15)
        np.testing.assert_array_equal(keep[0], [True, True, True, True, True, False])

    def test_no_crossing_keeps_nothing(self):
        sdf = np.full((2, 5), 0.1)
        keep = surface_mask(sdf, np.tile(np.arange(5.0), (2, 1)), np.ones((2, 5), dtype=bool), 0.1)
        assert not keep.any()

    def test_inactive_samples_never_kept(self):
        sdf = np.array([[0.2, -0.2, -0.3]])
        active = np.array([[True, True, False]])
        keep = surface_mask(sdf, np.array([[1.0, 1.05, 1.1]]), active, 0.5)
        np.testing.assert_array_equal(keep[0], [True, True, False])


@pytest.mark.unit
class TestVolumeRender:
    def test_constant_color_is_reproduced(self, rng):
        colors = np.broadcast_to([0.2, 0.4, 0.6], (3, 8, 3)).copy()
        sdf = rng.uniform(-0.05, 0.05, size=(3, 8))
        distances = np.sort(rng.uniform(0.5, 2.0, size=(3, 8)), axis=1)
        pred = volume_render(colors, sdf, distances, 0.02)
        np.testing.assert_allclose(pred.color, colors[:, 0], atol=1e-12)
        assert np.all(pred.depth >= distances[:, 0]) and np.all(pred.depth <= distances[:, -1])
        assert pred.valid.all()

    def test_empty_weights_render_invalid(self):
        pred = volume_render(np.ones((1, 4, 3)), np.zeros((1, 4)), np.arange(4.0)[None], 0.01,
                             keep=np.zeros((1, 4), dtype=bool))
        assert not pred.valid[0]
        assert pred.depth[0] == 0.0
        np.testing.assert_array_equal(pred.color[0], 0.0)


# ============================================================================
# Losses
# ============================================================================

def _render(color: float, depth: float, valid: bool = True, M: int = 4) -> PixelRender:
    return PixelRender(
        color=np.full((1, 3), color), depth=np.array([depth]), weight_sum=np.array([1.0]),
        valid=np.array([valid]), weights=np.zeros((1, M)),
    )


@pytest.mark.unit
class TestPixelLosses:
    @pytest.fixture
    def config(self) -> SlamConfig:
        return SlamConfig(truncation=0.1)

    def _consistent_samples(self, D: float):
        distances = np.array([[0.5, 0.8, D - 0.05, D, D + 0.05]])
        sdf = np.array([[0.1, 0.1, 0.05, 0.0, -0.05]])
        return sdf, distances, np.ones_like(sdf, dtype=bool)

    def test_photometric_and_depth_terms(self, config):
        sdf, distances, active = self._consistent_samples(1.2)
        terms = pixel_losses(_render(0.3, 1.0, M=5), np.full((1, 3), 0.5), np.array([1.2]),
                             sdf, distances, active, config)
        assert terms.pho[0] == pytest.approx(0.2)
        assert terms.geo[0] == pytest.approx(0.2)

    def test_consistent_samples_have_no_sdf_or_free_loss(self, config):
        sdf, distances, active = self._consistent_samples(1.2)
        terms = pixel_losses(_render(0.5, 1.2, M=5), np.full((1, 3), 0.5), np.array([1.2]),
                             sdf, distances, active, config)
        assert terms.sdf[0] == pytest.approx(0.0, abs=1e-24)
        assert terms.free[0] == pytest.approx(0.0, abs=1e-24)

    def test_free_space_term_pulls_toward_truncation(self, config):
        sdf, distances, active = self._consistent_samples(1.2)
        sdf[0, :2] = 0.0
        terms = pixel_losses(_render(0.5, 1.2, M=5), np.full((1, 3), 0.5), np.array([1.2]),
                             sdf, distances, active, config)
        assert terms.free[0] == pytest.approx(0.01)

    def test_invalid_render_keeps_only_geometry_terms(self, config):
        sdf, distances, active = self._consistent_samples(1.2)
        sdf[0, 3] = 0.02
        terms = pixel_losses(_render(0.0, 0.0, valid=False, M=5), np.full((1, 3), 0.5), np.array([1.2]),
                             sdf, distances, active, config)
        assert terms.pho[0] == 0.0 and terms.geo[0] == 0.0
        assert terms.sdf[0] == pytest.approx(0.0004 / 3)

    def test_invalid_observation_has_no_loss(self, config):
        sdf, distances, active = self._consistent_samples(1.2)
        terms = pixel_losses(_render(0.3, 1.0, M=5), np.full((1, 3), 0.5), np.array([0.0]),
                             sdf + 1.0, distances, active, config)
        assert terms.geo[0] == 0.0 and terms.sdf[0] == 0.0 and terms.free[0] == 0.0

    def test_combine_with_default_weights(self):
        total = combine_losses(1.0, 1.0, 1.0, 1.0, 1.0, SlamConfig())
        assert total == pytest.approx(1.0 + 0.1 + 5000.0 + 10.0 + 1e-8, rel=1e-15)

    def test_loss_terms_row(self):
        row = LossTerms(1.0, 2.0, 3.0, 4.0, 5.0, 6.0).as_row(7)
        assert row == {"step": 7, "L_pho": 1.0, "L_geo": 2.0, "L_sdf": 3.0, "L_free": 4.0, "L_smooth": 5.0, "L": 6.0}
        assert not LossTerms(total=float("nan")).is_finite()


# ============================================================================
# Batches and full renders
# ============================================================================

@pytest.mark.unit
class TestBatchesAndImages:
    def test_batch_holds_ray_distance(self, tiny_frame):
        pixels = np.array([0, 5, 17 * TINY_INTRINSICS.width + 3])
        batch = PixelBatch.from_frames({0: tiny_frame}, {0: pixels})
        _, scale = camera_directions(TINY_INTRINSICS, pixels)
        np.testing.assert_allclose(batch.depth, tiny_frame.depth.ravel()[pixels] * scale)
        np.testing.assert_array_equal(batch.keys, 0)

    def test_empty_batch_rejected(self, tiny_frame):
        with pytest.raises(EmptyStaticSetError):
            PixelBatch.from_frames({0: tiny_frame}, {0: np.array([], dtype=np.int64)})

    def test_fresh_map_renders_no_surface(self, small_config, tiny_frame, rng):
        params = initialize_map(small_config, ROOM_MIN, ROOM_MAX, rng)
        image = render_image(params, tiny_frame.gt_pose, TINY_INTRINSICS, small_config)
        assert not image.valid.any()
        assert np.all(image.depth == 0.0)
        assert image.stats["valid_fraction"] == 0.0

    def test_fresh_map_loss_has_no_render_terms(self, small_config, tiny_frame, rng):
        params = initialize_map(small_config, ROOM_MIN, ROOM_MAX, rng)
        pixels = rng.choice(tiny_frame.depth.size, size=40, replace=False)
        batch = PixelBatch.from_frames({0: tiny_frame}, {0: pixels})
        poses = {0: tiny_frame.gt_pose}
        samples = draw_samples(batch, poses, params, small_config, rng)
        result = total_loss(batch, samples, params, poses, small_config)
        assert result.n_valid == 0
        assert result.terms.pho == 0.0 and result.terms.geo == 0.0
        assert result.terms.free == pytest.approx(0.0, abs=1e-20)
        assert result.terms.sdf > 0.0
        assert result.terms.is_finite()
        assert set(result.map_grads) == set(params.tree)
        assert set(result.pose_grads) == {0}


@pytest.mark.unit
def test_stratified_samples_are_uniform_over_the_ray(rng):
    from scipy.stats import chisquare

    n = 50_000
    rays = RayBatch(np.zeros((n, 3)), np.tile([0.0, 0.0, 1.0], (n, 1)), np.full(n, 0.1), np.full(n, 2.1))
    samples = sample_along_ray(rays, None, 2, 0, 0.1, rng=rng)
    counts, _ = np.histogram(samples.distances.ravel(), bins=20, range=(0.1, 2.1))
    assert counts.sum() == 2 * n
    assert chisquare(counts).pvalue > 1e-3


@pytest.mark.unit
def test_weight_strictly_decreasing_in_magnitude():
    s = np.linspace(0.0, 0.2, 201)
    w = render_weight(s, 0.02)
    assert np.all(np.diff(w) < 0)
    np.testing.assert_array_equal(w, render_weight(-s, 0.02))


@pytest.mark.unit
def test_depth_is_convex_combination_for_many_rays(rng):
    n, M = 10_000, 12
    distances = np.sort(rng.uniform(0.1, 4.0, size=(n, M)), axis=1)
    sdf = rng.uniform(-0.05, 0.05, size=(n, M))
    colors = rng.uniform(size=(n, M, 3))
    pred = volume_render(colors, sdf, distances, 0.01, w_min=1e-300)
    ok = pred.valid
    assert np.all(pred.depth[ok] >= distances[ok, 0] - 1e-12)
    assert np.all(pred.depth[ok] <= distances[ok, -1] + 1e-12)
    assert np.all(pred.color[ok] >= colors[ok].min(axis=1) - 1e-12)
    assert np.all(pred.color[ok] <= colors[ok].max(axis=1) + 1e-12)
