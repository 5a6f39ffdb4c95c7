"""Tests for view sampling: seeded RNG streams, the adaptive translation
radius, circle sampling, and sampled-camera construction."""

import numpy as np
import pytest

from flowsplat import (
    Camera,
    NonPositiveDepthError,
    RigidTransform,
    SamplerConfig,
    adaptive_radius,
    mean_rendered_depth,
    relative_transform,
    rng_stream,
    sample_translation,
    sample_view,
)
from flowsplat.geometry import quaternion_to_rotation
from flowsplat.sampling import MEAN_DEPTH_FLOOR


def make_camera(pose=None, fx=100.0, fy=100.0):
    if pose is None:
        pose = RigidTransform.identity()
    return Camera(fx=fx, fy=fy, cx=31.5, cy=31.5, width=64, height=64, pose=pose)


class TestRngStream:
    def test_same_key_same_sequence(self):
        a = rng_stream(7, "texture").random(16)
        b = rng_stream(7, "texture").random(16)
        assert np.array_equal(a, b)

    def test_different_tags_different_sequences(self):
        a = rng_stream(7, "texture").random(16)
        b = rng_stream(7, "views").random(16)
        c = rng_stream(7, "oracle", 3, 1).random(16)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(b, c)

    def test_different_seeds_different_sequences(self):
        a = rng_stream(0, "xi").random(16)
        b = rng_stream(1, "xi").random(16)
        assert not np.array_equal(a, b)

    def test_integer_tags_index_streams(self):
        draws = {rng_stream(0, "errormap", k).random() for k in range(8)}
        assert len(draws) == 8


class TestAdaptiveRadius:
    def test_reference_value(self):
        # sigma = 23 px, depth 2, focal 100 -> radius 0.46.
        cam = make_camera()
        assert adaptive_radius(2.0, cam, 23.0) == pytest.approx(0.46, rel=1e-15)

    def test_uses_mean_focal(self):
        cam = make_camera(fx=120.0, fy=80.0)
        assert adaptive_radius(2.0, cam, 23.0) == pytest.approx(0.46, rel=1e-15)

    def test_scales_with_depth_and_sigma(self):
        cam = make_camera()
        assert adaptive_radius(4.0, cam, 23.0) == pytest.approx(0.92, rel=1e-15)
        assert adaptive_radius(2.0, cam, 46.0) == pytest.approx(0.92, rel=1e-15)

    def test_collapsed_depth_clamped(self):
        cam = make_camera()
        assert adaptive_radius(1e-9, cam, 23.0) == adaptive_radius(MEAN_DEPTH_FLOOR, cam, 23.0)

    def test_nonpositive_depth_rejected(self):
        cam = make_camera()
        with pytest.raises(NonPositiveDepthError):
            adaptive_radius(0.0, cam, 23.0)
        with pytest.raises(NonPositiveDepthError):
            adaptive_radius(-1.0, cam, 23.0)


class TestSampleTranslation:
    def test_phase_zero_points_along_y(self):
        t = sample_translation(0.46, 0.0)
        assert t[0] == 0.0 and t[1] == 0.46 and t[2] == 0.0

    def test_quarter_phase_points_along_x(self):
        t = sample_translation(1.0, 0.25)
        assert t[0] == pytest.approx(1.0, abs=1e-15)
        assert t[1] == pytest.approx(0.0, abs=1e-15)

    def test_norm_equals_radius_and_t3_zero(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            eps_t, xi = rng.uniform(0.01, 2.0), rng.random()
            t = sample_translation(eps_t, xi)
            assert np.hypot(t[0], t[1]) == pytest.approx(eps_t, rel=1e-12)
            assert t[2] == 0.0

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            sample_translation(-0.1, 0.0)


class TestSamplerConfig:
    def test_defaults(self):
        cfg = SamplerConfig()
        assert cfg.sigma == 23.0 and cfg.mode == "random" and cfg.xi0 == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(sigma=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(mode="spiral")
        with pytest.raises(ValueError):
            SamplerConfig(xi0=1.0)
        with pytest.raises(ValueError):
            SamplerConfig(xi0=-0.1)


class TestSampleView:
    def test_fixed_mode_never_consults_rng(self):
        cam = make_camera()
        rng = rng_stream(0, "xi")
        untouched = rng_stream(0, "xi")
        view = sample_view(cam, 2.0, SamplerConfig(mode="fixed", xi0=0.0), rng)
        assert view.xi == 0.0
        assert rng.random() == untouched.random()

    def test_random_mode_draws_exactly_once(self):
        cam = make_camera()
        rng = rng_stream(3, "xi")
        mirror = rng_stream(3, "xi")
        view = sample_view(cam, 2.0, SamplerConfig(mode="random"), rng)
        assert view.xi == mirror.random()
        assert rng.random() == mirror.random()

    def test_reference_translation(self):
        # sigma 23, depth 2, focal 100, xi = 0 -> t = (0, 0.46, 0).
        cam = make_camera()
        view = sample_view(cam, 2.0, SamplerConfig(mode="fixed", xi0=0.0), rng_stream(0, "xi"))
        assert view.eps_t == pytest.approx(0.46, rel=1e-15)
        assert np.allclose(view.t, [0.0, 0.46, 0.0])

    def test_sampled_camera_geometry(self):
        rot = quaternion_to_rotation(np.array([2.0, 0.4, -0.3, 0.9]))
        pose = RigidTransform(rot, np.array([0.3, -0.2, 1.0]))
        cam = make_camera(pose=pose)
        view = sample_view(cam, 2.5, SamplerConfig(sigma=23.0, mode="random"), rng_stream(9, "xi"))
        sampled = view.camera
        assert (sampled.fx, sampled.fy, sampled.cx, sampled.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)
        assert (sampled.width, sampled.height) == (cam.width, cam.height)
        assert np.array_equal(sampled.pose.rotation, pose.rotation)
        assert np.array_equal(sampled.pose.translation, pose.translation + view.t)
        # Input -> sampled is a pure image-plane translation by t.
        rel = relative_transform(cam.pose, sampled.pose)
        assert np.allclose(rel.rotation, np.eye(3), atol=1e-13)
        assert np.allclose(rel.translation, view.t, atol=1e-13)
        assert np.hypot(*view.t[:2]) == pytest.approx(view.eps_t, rel=1e-12)

    def test_xi_distribution_sanity(self):
        cam = make_camera()
        rng = rng_stream(0, "xi")
        cfg = SamplerConfig(mode="random")
        xs = np.array([sample_view(cam, 2.0, cfg, rng).xi for _ in range(2000)])
        assert np.all((xs >= 0.0) & (xs < 1.0))
        assert abs(xs.mean() - 0.5) < 0.02
        assert xs.min() < 0.02 and xs.max() > 0.98


class TestMeanRenderedDepth:
    def test_mean_over_covered_pixels(self):
        depth = np.array([[1.0, 3.0], [5.0, 7.0]])
        alpha = np.array([[1.0, 1.0], [0.0, 1.0]])
        assert mean_rendered_depth(depth, alpha) == pytest.approx((1 + 3 + 7) / 3)

    def test_uncovered_scene_returns_floor(self):
        depth = np.full((4, 4), 9.0)
        alpha = np.zeros((4, 4))
        assert mean_rendered_depth(depth, alpha) == MEAN_DEPTH_FLOOR

    def test_coverage_threshold_is_strict(self):
        depth = np.array([[5.0]])
        assert mean_rendered_depth(depth, np.array([[1e-4]])) == MEAN_DEPTH_FLOOR
        assert mean_rendered_depth(depth, np.array([[1.1e-4]])) == 5.0

    def test_accepts_torch_tensors(self):
        import torch

        depth = torch.full((3, 3), 2.0, dtype=torch.float64)
        alpha = torch.ones(3, 3, dtype=torch.float64)
        assert mean_rendered_depth(depth, alpha) == 2.0
