"""합성 장면: SDF 프리미티브, 스피어 트레이싱, 카메라 리그, 깊이 사전, 키포인트, 장면 디렉터리"""
import json
import math

import numpy as np
import pytest
import torch

from src import constants as C
from src.geometry import pixel_directions
from src.losses import SparseKeypoints, calibrate_depth, depth_residual
from src.scene_io import read_cameras, read_keypoints, read_pf2
from src.synth import (AnalyticScene, Box, Sphere, get_preset, make_camera_rig, render_ground_truth,
                       sample_surface_points, scene_sdf, synthesize_depth_prior, synthesize_keypoints, trace_rays,
                       visible_from)

from conftest import make_camera

UNIT_SPHERE = AnalyticScene([Sphere((0.0, 0.0, 0.0), 0.5)])


def _rays_from(center, targets):
    o = torch.as_tensor(np.asarray(center, dtype=np.float64)).expand(len(targets), 3)
    d = torch.as_tensor(np.asarray(targets, dtype=np.float64)) - o
    return o, d / torch.linalg.norm(d, dim=-1, keepdim=True)


def _slab_entry(origin, direction, half):
    """축 정렬 박스 진입 거리"""
    t1 = (-half - origin) / direction
    t2 = (half - origin) / direction
    return float(np.max(np.minimum(t1, t2)))


class TestPrimitives:
    @pytest.mark.parametrize("point, expected", [
        ((1.0, 0.0, 0.0), 0.5),
        ((0.0, 0.0, 0.0), -0.5),
        ((0.0, 0.5, 0.0), 0.0),
    ])
    def test_sphere(self, point, expected):
        assert scene_sdf(UNIT_SPHERE, point) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("point, expected", [
        ((1.0, 0.0, 0.0), 0.5),
        ((1.0, 1.0, 0.0), math.sqrt(0.5)),
        ((0.0, 0.0, 0.0), -0.5),
    ])
    def test_box(self, point, expected):
        scene = AnalyticScene([Box((0.0, 0.0, 0.0), (0.5, 0.5, 0.5))])
        assert scene_sdf(scene, point) == pytest.approx(expected, abs=1e-12)

    def test_union_is_min(self):
        scene = AnalyticScene([Sphere((-0.3, 0.0, 0.0), 0.2), Sphere((0.3, 0.0, 0.0), 0.2)])
        assert scene_sdf(scene, (0.3, 0.0, 0.0)) == pytest.approx(-0.2)
        assert scene_sdf(scene, (0.0, 0.0, 0.0)) == pytest.approx(0.1)

    def test_soft_min_bounds(self, rng):
        k = 0.05
        prims = [Sphere((-0.2, 0.0, 0.0), 0.35), Box((0.3, 0.0, 0.0), (0.25, 0.25, 0.25))]
        hard = AnalyticScene(prims)
        soft = AnalyticScene(prims, blend=k)
        pts = rng.uniform(-0.8, 0.8, size=(200, 3))
        f_hard = scene_sdf(hard, pts)
        f_soft = scene_sdf(soft, pts)
        assert np.all(f_soft <= f_hard + 1e-12)
        assert np.all(f_soft >= f_hard - k * math.log(2) - 1e-12)

    def test_out_of_bound_primitive_rejected(self):
        with pytest.raises(ValueError):
            AnalyticScene([Sphere((0.8, 0.0, 0.0), 0.5)])

    def test_dict_round_trip(self):
        scene = get_preset("spherebox3").scene
        back = AnalyticScene.from_dict(json.loads(json.dumps(scene.to_dict())))
        pts = np.random.default_rng(0).uniform(-1, 1, size=(20, 3))
        np.testing.assert_array_equal(scene_sdf(scene, pts), scene_sdf(back, pts))


class TestSphereTracing:
    def test_axis_ray_hits_sphere(self):
        cam = make_camera((0.0, 0.0, 2.0))
        px = torch.tensor([[50.0, 50.0]], dtype=torch.float64)
        d = pixel_directions(px, cam)
        t = trace_rays(UNIT_SPHERE, torch.as_tensor(cam.center).expand_as(d), d)
        assert float(t[0]) == pytest.approx(1.5, abs=1e-5)

    def test_miss_is_nan(self):
        o = torch.tensor([[0.0, 0.9, 2.0]], dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64)
        assert math.isnan(float(trace_rays(UNIT_SPHERE, o, d)[0]))

    def test_box_matches_slab_intersection(self, rng):
        half = np.array([0.3, 0.2, 0.25])
        scene = AnalyticScene([Box((0.0, 0.0, 0.0), tuple(half))])
        center = np.array([1.2, 0.9, 1.1])
        targets = rng.uniform(-0.5, 0.5, size=(16, 3)) * half
        o, d = _rays_from(center, targets)
        t = trace_rays(scene, o, d).numpy()
        for i in range(len(targets)):
            assert t[i] == pytest.approx(_slab_entry(center, d[i].numpy(), half), abs=1e-4)

    def test_ground_truth_render(self):
        cam = make_camera((0.0, 0.0, 2.0), size=24, K=np.array([[20.0, 0, 11.5], [0, 20.0, 11.5], [0, 0, 1]]))
        image, depth = render_ground_truth(UNIT_SPHERE, cam)
        assert image.shape == (24, 24, 3)
        assert depth.shape == (24, 24)
        assert np.isnan(depth[0, 0])
        assert depth[11, 11] == pytest.approx(1.5, abs=0.01)
        assert float(image.min()) >= 0.0 and float(image.max()) <= 1.0


class TestCameraRig:
    def test_single_view_rejected(self):
        with pytest.raises(ValueError):
            make_camera_rig(1, 2.0, 45.0, 64, 56.0)

    def test_radius_inside_bound_rejected(self):
        with pytest.raises(ValueError):
            make_camera_rig(3, 0.9, 45.0, 64, 56.0)

    @pytest.mark.parametrize("angle", [15.0, 45.0])
    def test_pairwise_axis_angle(self, angle):
        cams = make_camera_rig(3, 2.0, angle, 64, 56.0)
        for i in range(3):
            for j in range(i + 1, 3):
                cos = float(np.dot(cams[i].optical_axis, cams[j].optical_axis))
                assert math.degrees(math.acos(np.clip(cos, -1, 1))) == pytest.approx(angle, abs=1e-9)

    def test_cameras_look_at_origin(self):
        for cam in make_camera_rig(4, 2.5, 30.0, (48, 32), 40.0):
            assert np.linalg.norm(cam.center) == pytest.approx(2.5)
            np.testing.assert_allclose(cam.optical_axis, -cam.center / 2.5, atol=1e-12)
            assert (cam.width, cam.height) == (48, 32)


class TestDepthPrior:
    def _view(self):
        cam = make_camera_rig(3, 2.0, 45.0, 32, 28.0)[0]
        _, depth = render_ground_truth(UNIT_SPHERE, cam)
        return cam, depth

    def _pixel_keypoints(self, depth, n=20):
        v, u = np.nonzero(np.isfinite(depth))
        idx = np.linspace(0, len(u) - 1, n).astype(int)
        return SparseKeypoints(np.stack([u[idx], v[idx]], axis=1).astype(np.float64), depth[v[idx], u[idx]])

    def test_inverse_affine_recovered(self):
        _, depth = self._view()
        prior = synthesize_depth_prior(depth, 2.0, 0.3, 0.0)
        cal = calibrate_depth(prior, self._pixel_keypoints(depth))
        assert not cal.degenerate
        assert cal.a == pytest.approx(2.0, abs=1e-9)
        assert cal.b == pytest.approx(0.3, abs=1e-9)

    def test_distortion_reduces_but_keeps_residual(self):
        _, depth = self._view()
        prior = synthesize_depth_prior(depth, 2.0, 0.3, 0.05)
        kps = self._pixel_keypoints(depth)
        cal = calibrate_depth(prior, kps)
        calibrated = depth_residual(prior, kps, cal.a, cal.b)
        assert 0.0 < calibrated < depth_residual(prior, kps, 1.0, 0.0)

    def test_misses_stay_nan(self):
        _, depth = self._view()
        prior = synthesize_depth_prior(depth, 2.0, 0.3, 0.05)
        np.testing.assert_array_equal(np.isnan(prior.map), np.isnan(depth))

    def test_non_positive_scale_rejected(self):
        with pytest.raises(ValueError):
            synthesize_depth_prior(np.ones((2, 2)), 0.0, 0.0)


class TestSurfaceAndKeypoints:
    def test_surface_points_on_surface(self, rng):
        pts = sample_surface_points(UNIT_SPHERE, 100, rng)
        assert pts.shape == (100, 3)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 0.5, atol=1e-8)

    def test_keypoints_visible_in_two_views(self, rng):
        cams = make_camera_rig(3, 2.0, 45.0, 32, 28.0)
        kps = synthesize_keypoints(UNIT_SPHERE, cams, 16, rng)
        assert len(kps) == 16
        for p, vis in zip(kps.points, kps.visibility):
            assert len(vis) >= 2
            assert abs(scene_sdf(UNIT_SPHERE, p)) < 1e-6
            for i in vis:
                assert bool(visible_from(UNIT_SPHERE, p[None], cams[i])[0])

    def test_far_side_not_visible(self):
        cam = make_camera((0.0, 0.0, 2.0))
        assert not bool(visible_from(UNIT_SPHERE, np.array([[0.0, 0.0, -0.5]]), cam)[0])
        assert bool(visible_from(UNIT_SPHERE, np.array([[0.0, 0.0, 0.5]]), cam)[0])

    def test_keypoints_need_two_points(self, rng):
        with pytest.raises(ValueError):
            synthesize_keypoints(UNIT_SPHERE, make_camera_rig(3, 2.0, 45.0, 32, 28.0), 1, rng)


class TestPresets:
    @pytest.mark.parametrize("name", C.SYNTH_PRESETS)
    def test_known_presets(self, name):
        preset = get_preset(name)
        assert preset.name == name
        assert preset.n_views >= 2

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="프리셋"):
            get_preset("teapot")

    def test_wide_preset_uses_small_angle(self):
        assert get_preset("sphere3-wide").angle_deg == 15.0


class TestWriteScene:
    def test_directory_layout(self, small_scene_dir):
        views = read_cameras(small_scene_dir / C.CAMERAS_FILE)
        assert len(views) == 3
        for v in views:
            assert (small_scene_dir / v.image).exists()
            prior = read_pf2(small_scene_dir / v.depth_prior)
            assert prior.shape == (v.camera.height, v.camera.width)
        doc = json.loads((small_scene_dir / C.SCENE_FILE).read_text(encoding="utf-8"))
        assert doc["preset"] == "sphere3"
        assert doc["prior"]["a"] == 2.0

    def test_keypoints_file(self, small_scene_dir):
        points, visibility = read_keypoints(small_scene_dir / C.KEYPOINTS_FILE)
        assert len(points) == 16
        assert all(len(v) >= 2 for v in visibility)
