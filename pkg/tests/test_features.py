"""내장 디스크립터, 쌍선형 샘플링, 유사도, FMAP 입출력"""
import numpy as np
import pytest
import torch

from src.features import (DescriptorConfig, FeatureMap, bilinear_sample, cosine_similarity, extract_features,
                          load_feature_maps, sample_bilinear, save_feature_map, similarity)
from src.geometry import OUT_OF_VIEW
from src.utils import SceneFormatError

FULL = DescriptorConfig(scale=1.0)
# 스케일별 채널 배치: 0 밝기, 1 gx, 2 gy, 3..11 패치
GRAD_X = (1, 13)
GRAD_Y = (2, 14)
NON_INTENSITY = [c for c in range(24) if c not in (0, 12)]


class TestDescriptor:
    def test_channel_count_and_scale(self):
        fmap = extract_features(np.random.default_rng(0).uniform(size=(32, 48, 3)))
        assert fmap.channels == 24
        assert (fmap.height, fmap.width) == (16, 24)
        assert fmap.scale == 0.5

    def test_constant_image(self):
        fmap = extract_features(np.full((32, 32), 0.4), FULL)
        np.testing.assert_allclose(fmap.data[NON_INTENSITY], 0.0, atol=1e-7)

    def test_copy_gives_identical_maps(self):
        img = np.random.default_rng(1).uniform(size=(32, 32, 3))
        a = extract_features(img)
        b = extract_features(img.copy())
        assert np.array_equal(a.data, b.data)

    def test_horizontal_ramp(self):
        w = 64
        img = np.tile(np.arange(w, dtype=np.float64) / w, (w, 1))
        fmap = extract_features(img, FULL)
        interior = (slice(16, 48), slice(16, 48))
        for c in GRAD_X:
            np.testing.assert_allclose(fmap.data[c][interior], 1.0 / w, atol=1e-6)
        for c in GRAD_Y:
            np.testing.assert_allclose(fmap.data[c][interior], 0.0, atol=1e-6)

    def test_integer_shift_covariance(self):
        img = np.random.default_rng(2).uniform(size=(32, 32))
        a = extract_features(img, FULL).data
        b = extract_features(np.roll(img, (3, -5), axis=(0, 1)), FULL).data
        np.testing.assert_allclose(np.roll(a, (3, -5), axis=(1, 2))[NON_INTENSITY], b[NON_INTENSITY], atol=1e-5)

    def test_too_small_image_raises(self):
        with pytest.raises(ValueError):
            extract_features(np.zeros((8, 8)))


class TestBilinear:
    def test_integer_pixel_exact(self):
        data = torch.as_tensor(np.random.default_rng(0).uniform(size=(2, 4, 5)))
        values, valid = bilinear_sample(data, torch.tensor([[3.0, 2.0]], dtype=torch.float64))
        assert bool(valid[0])
        np.testing.assert_array_equal(values[0].numpy(), data[:, 2, 3].numpy())

    def test_midpoint(self):
        data = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]], dtype=torch.float64)
        values, _ = bilinear_sample(data, torch.tensor([[0.5, 0.0]], dtype=torch.float64))
        assert float(values[0, 0]) == pytest.approx(0.5, abs=1e-15)

    def test_matches_four_term_blend(self, rng):
        data = rng.uniform(size=(3, 6, 7))
        coords = rng.uniform([0.0, 0.0], [6.0, 5.0], size=(50, 2))
        values, valid = bilinear_sample(torch.as_tensor(data), torch.as_tensor(coords))
        assert bool(valid.all())
        for (x, y), v in zip(coords, values.numpy()):
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - x0, y - y0
            expected = (data[:, y0, x0] * (1 - fx) * (1 - fy) + data[:, y0, x0 + 1] * fx * (1 - fy)
                        + data[:, y0 + 1, x0] * (1 - fx) * fy + data[:, y0 + 1, x0 + 1] * fx * fy)
            np.testing.assert_allclose(v, expected, atol=1e-12)

    def test_outside_half_pixel_border(self):
        data = torch.zeros(1, 4, 4, dtype=torch.float64)
        _, valid = bilinear_sample(data, torch.tensor([[-0.4, 0.0], [3.6, 1.0], [1.0, -0.6]], dtype=torch.float64))
        assert valid.tolist() == [True, False, False]

    def test_out_of_view_sentinel(self):
        fmap = FeatureMap(np.zeros((2, 8, 8)), scale=1.0)
        assert sample_bilinear(fmap, (20.0, 1.0)) is OUT_OF_VIEW
        np.testing.assert_array_equal(sample_bilinear(fmap, (1.0, 1.0)), [0.0, 0.0])

    def test_half_scale_coordinates(self):
        fmap = FeatureMap(np.zeros((1, 8, 8)), scale=0.5)
        q = fmap.to_map_coords(torch.tensor([[0.0, 0.0], [1.5, 1.5]], dtype=torch.float64))
        np.testing.assert_allclose(q.numpy(), [[-0.25, -0.25], [0.5, 0.5]])


class TestSimilarity:
    @pytest.mark.parametrize("a, b, expected", [
        ((1.0, 0.0), (1.0, 0.0), 1.0),
        ((1.0, 0.0), (0.0, 1.0), 0.0),
        ((1.0, 2.0), (2.0, 4.0), 1.0),
    ])
    def test_cosine_examples(self, a, b, expected):
        assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-7)

    def test_zero_vector_is_zero(self):
        assert cosine_similarity((0.0, 0.0), (1.0, 0.0)) == 0.0
        assert float(similarity(torch.zeros(1, 2), torch.ones(1, 2))[0]) == 0.0

    def test_batched_cos_matches_scalar(self, rng):
        a, b = rng.normal(size=(10, 24)), rng.normal(size=(10, 24))
        out = similarity(torch.as_tensor(a), torch.as_tensor(b), "cos").numpy()
        np.testing.assert_allclose(out, [cosine_similarity(x, y) for x, y in zip(a, b)], atol=1e-12)

    def test_distance_metrics(self):
        a = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
        b = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
        assert float(similarity(a, b, "l1")[0]) == pytest.approx(-3.5)
        assert float(similarity(a, b, "l2")[0]) == pytest.approx(-5.0)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            similarity(torch.zeros(1, 2), torch.zeros(1, 2), "dot")


class TestFeatureMapFile:
    def test_round_trip_bitwise(self, tmp_path, rng):
        fmap = FeatureMap(rng.normal(size=(24, 5, 7)).astype(np.float32), scale=0.5)
        save_feature_map(tmp_path / "a.fmap", fmap)
        back = load_feature_maps(tmp_path / "a.fmap")
        assert back.scale == 0.5
        assert np.array_equal(back.data, fmap.data)

    def test_truncated_file_names_offset(self, tmp_path, rng):
        path = tmp_path / "a.fmap"
        save_feature_map(path, FeatureMap(rng.normal(size=(4, 3, 3)).astype(np.float32), scale=1.0))
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(SceneFormatError) as exc:
            load_feature_maps(path)
        assert exc.value.offset == len(data) - 10

    def test_channel_count_mismatch(self, tmp_path):
        path = tmp_path / "a.fmap"
        payload = np.zeros((3, 4, 4), dtype="<f4").tobytes()
        path.write_bytes(b"FMAP 2 4 4 1.0\n" + payload)
        with pytest.raises(SceneFormatError, match="채널"):
            load_feature_maps(path)

    def test_disallowed_scale(self, tmp_path):
        path = tmp_path / "a.fmap"
        path.write_bytes(b"FMAP 1 2 2 0.3\n" + np.zeros(4, dtype="<f4").tobytes())
        with pytest.raises(SceneFormatError):
            load_feature_maps(path)

    def test_from_image_file(self, tmp_path, rng):
        from src.scene_io import read_image, write_image
        write_image(tmp_path / "a.png", rng.uniform(size=(32, 32, 3)))
        fmap = FeatureMap.from_image_file(tmp_path / "a.png", scale=0.5)
        expected = extract_features(read_image(tmp_path / "a.png"), DescriptorConfig(scale=0.5))
        assert np.array_equal(fmap.data, expected.data)
