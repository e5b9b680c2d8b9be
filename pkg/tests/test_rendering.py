"""계층적 샘플링, SDF -> 불투명도, 가중치, 색상/깊이/특징 누적"""
import math

import numpy as np
import pytest
import torch

from src.field import AnalyticField, eval_sdf
from src.geometry import generate_rays, near_far_from_sphere, pixel_directions
from src.rendering import (compute_weights, render, render_depth, render_feature_similarity, render_rays,
                           sample_pdf, sample_ray, sdf_to_alpha, to_sections)

from conftest import make_camera


def _logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _axis_rays(n: int = 4):
    cam = make_camera((0.0, 0.0, 2.0))
    pixels = torch.tensor([[50.0, 50.0]] * n, dtype=torch.float64)
    dirs = pixel_directions(pixels, cam)
    origins = torch.as_tensor(cam.center).expand_as(dirs)
    near, far, _ = near_far_from_sphere(origins, dirs, 1.0)
    return generate_rays(cam, pixels, near, far)


class TestSdfToAlpha:
    def test_constant_sdf(self):
        sdf = torch.full((2, 8), 0.3, dtype=torch.float64)
        assert float(sdf_to_alpha(sdf, 50.0).abs().max()) == 0.0

    def test_increasing_sdf_is_clamped(self):
        sdf = torch.linspace(-0.5, 0.5, 9, dtype=torch.float64)[None]
        assert float(sdf_to_alpha(sdf, 10.0).max()) == 0.0

    def test_logistic_oracle(self):
        alpha = sdf_to_alpha(torch.tensor([[0.1, -0.1]], dtype=torch.float64), 10.0)
        expected = (_logistic(1.0) - _logistic(-1.0)) / _logistic(1.0)
        assert float(alpha[0, 0]) == pytest.approx(expected, abs=1e-12)

    def test_stable_for_deep_negative_values(self):
        alpha = sdf_to_alpha(torch.tensor([[-50.0, -60.0]], dtype=torch.float64), 100.0)
        assert bool(torch.isfinite(alpha).all())

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            sdf_to_alpha(torch.zeros(1, 1), 1.0)

    def test_depends_only_on_sdf_along_ray(self):
        # 광선 원점을 δ만큼 뒤로 옮기고 샘플 거리도 δ만큼 늘리면 같은 점
        field = AnalyticField.sphere(0.5, s=64.0)
        t = torch.linspace(1.0, 2.0, 64, dtype=torch.float64)[None]
        d = torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64)
        alphas, depths = [], []
        for delta in (0.0, 0.37, 3.0):
            origin = torch.tensor([0.0, 0.0, 2.0 + delta], dtype=torch.float64)
            dist = t + delta
            sdf = eval_sdf(field, origin + dist[..., None] * d)
            alpha = sdf_to_alpha(sdf, float(field.s))
            alphas.append(alpha)
            depths.append(float(render(None, compute_weights(alpha), torch.zeros(1, 63, 3, dtype=torch.float64),
                                       to_sections(dist)).rendered_depth[0]) - delta)
        for alpha in alphas[1:]:
            np.testing.assert_allclose(alpha.numpy(), alphas[0].numpy(), atol=1e-12)
        assert depths[0] == pytest.approx(1.5, abs=0.02)
        assert depths[1] == pytest.approx(depths[0], abs=1e-9)
        assert depths[2] == pytest.approx(depths[0], abs=1e-9)


class TestComputeWeights:
    @pytest.mark.parametrize("alphas, expected", [
        ([1.0, 0.7], [1.0, 0.0]),
        ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        ([0.5, 0.5], [0.5, 0.25]),
    ])
    def test_examples(self, alphas, expected):
        w = compute_weights(torch.tensor([alphas], dtype=torch.float64))
        np.testing.assert_allclose(w[0].numpy(), expected, atol=1e-15)

    def test_weights_sum_at_most_one(self):
        a = torch.rand(100, 32, dtype=torch.float64)
        w = compute_weights(a)
        assert float(w.min()) >= 0.0
        assert float(w.sum(-1).max()) <= 1.0 + 1e-12

    def test_weights_plus_transmittance_is_one(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.rand(10000, 32, dtype=torch.float64, generator=gen)
        a[::7, 5] = 0.0
        a[::11, 20] = 1.0
        a[::13] = a[::13] ** 8
        w = compute_weights(a)
        residual = w.sum(-1) + torch.prod(1.0 - a, dim=-1)
        assert float((residual - 1.0).abs().max()) <= 1e-9


class TestRender:
    def test_depth_is_weighted_mean(self):
        w = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
        res = render(None, w, torch.zeros(1, 3, 3, dtype=torch.float64),
                     torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64))
        assert float(res.rendered_depth[0]) == pytest.approx(2.0)
        assert bool(res.valid[0])

    def test_empty_ray_is_invalid(self):
        w = torch.zeros(1, 3, dtype=torch.float64)
        res = render(None, w, torch.ones(1, 3, 3, dtype=torch.float64),
                     torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64))
        assert not bool(res.valid[0])
        assert float(res.rendered_color.abs().max()) == 0.0


class TestFeatureAccumulation:
    def test_unit_similarity(self):
        w = torch.full((3, 4), 0.25, dtype=torch.float64)
        sims = torch.ones(3, 2, 4, dtype=torch.float64)
        np.testing.assert_allclose(render_feature_similarity(w, sims).numpy(), 1.0, atol=1e-15)

    def test_zero_weights(self):
        sims = torch.rand(3, 2, 4, dtype=torch.float64)
        assert float(render_feature_similarity(torch.zeros(3, 4, dtype=torch.float64), sims).abs().max()) == 0.0

    def test_matches_loop_oracle(self, rng):
        w = rng.uniform(size=(5, 8))
        sims = rng.uniform(-1, 1, size=(5, 3, 8))
        out = render_feature_similarity(torch.as_tensor(w), torch.as_tensor(sims)).numpy()
        for r in range(5):
            for s in range(3):
                expected = sum(w[r, i] * sims[r, s, i] for i in range(8))
                assert out[r, s] == pytest.approx(expected, abs=1e-12)


class TestSampling:
    def test_coarse_only_one_per_stratum(self):
        rays = _axis_rays()
        samples = sample_ray(rays, AnalyticField.sphere(), n_coarse=16, n_importance=0,
                             generator=torch.Generator().manual_seed(0))
        t = samples.distances
        assert t.shape == (4, 16)
        stratum = torch.floor((t - rays.near[:, None]) / (rays.far - rays.near)[:, None] * 16)
        assert torch.equal(stratum, torch.arange(16, dtype=t.dtype).expand_as(stratum))

    def test_importance_concentrates_on_heavy_stratum(self):
        bins = torch.linspace(0.0, 1.0, 17, dtype=torch.float64)[None]
        weights = torch.zeros(1, 16, dtype=torch.float64)
        weights[0, 5] = 1.0
        t = sample_pdf(bins, weights, 10_000, torch.Generator().manual_seed(0))
        near_heavy = ((t >= bins[0, 4]) & (t <= bins[0, 7])).double().mean()
        assert float(near_heavy) >= 0.8

    def test_same_generator_same_samples(self):
        rays = _axis_rays()
        field = AnalyticField.sphere()
        a = sample_ray(rays, field, 16, 8, torch.Generator().manual_seed(7))
        b = sample_ray(rays, field, 16, 8, torch.Generator().manual_seed(7))
        assert torch.equal(a.distances, b.distances)

    def test_samples_sorted_within_bounds(self):
        rays = _axis_rays()
        s = sample_ray(rays, AnalyticField.sphere(), 16, 16, torch.Generator().manual_seed(1))
        assert s.distances.shape == (4, 32)
        assert bool((s.distances[:, 1:] >= s.distances[:, :-1]).all())
        assert bool((s.distances >= rays.near[:, None]).all() and (s.distances <= rays.far[:, None]).all())

    def test_needs_two_coarse_samples(self):
        with pytest.raises(ValueError):
            sample_ray(_axis_rays(), AnalyticField.sphere(), n_coarse=1, n_importance=0)


class TestRenderField:
    def test_sharp_sphere_depth(self):
        """선명한 해석적 구: 축 방향 광선 깊이 1.5 (1% 이내)"""
        rays = _axis_rays(1)
        res = render_depth(AnalyticField.sphere(0.5, s=2000.0), rays, 64, 64, perturb=False)
        assert bool(res.valid[0])
        assert float(res.rendered_depth[0]) == pytest.approx(1.5, rel=0.01)

    def test_render_rays_normals_face_camera(self):
        rays = _axis_rays(2)
        res = render_rays(AnalyticField.sphere(0.5, s=500.0), rays, 32, 32, perturb=False)
        np.testing.assert_allclose(res.surface_normals.detach().numpy(), [[0.0, 0.0, 1.0]] * 2, atol=1e-3)
        assert res.field_output.gradient.shape == (2, 64, 3)
