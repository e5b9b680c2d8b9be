"""공용 픽스처: 작은 카메라, 작은 합성 장면, 작은 필드 설정"""
from dataclasses import replace

import numpy as np
import pytest

from src.field import FieldConfig
from src.geometry import Camera, look_at
from src.pipeline.scene import load_scene
from src.pipeline.trainer import TrainConfig
from src.synth import get_preset, write_scene

K100 = np.array([[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]])


def make_camera(center, K=K100, size=100) -> Camera:
    R, t = look_at(center)
    return Camera(K, R, t, size, size)


def small_preset(name: str = "sphere3", **overrides):
    """32x32 이미지, 초점 28 (경계 구가 화면 안에 들어옴)"""
    return replace(get_preset(name), image_size=32, focal=28.0, n_keypoints=16, **overrides)


def tiny_field_config() -> FieldConfig:
    return FieldConfig(hidden_layers=2, hidden_dim=32, skip_layers=(), feature_dim=8,
                       color_layers=1, color_dim=16)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(total_steps=10, rays_per_batch=32, n_coarse=16, n_importance=8, log_every=5,
                ckpt_every=0, field=tiny_field_config())
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def identity_camera() -> Camera:
    return Camera(np.eye(3), np.eye(3), np.zeros(3), 4, 4)


@pytest.fixture
def k100_camera() -> Camera:
    return Camera(K100, np.eye(3), np.zeros(3), 100, 100)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory):
    return write_scene(small_preset(), tmp_path_factory.mktemp("scene") / "sphere3", seed=0)


@pytest.fixture(scope="session")
def small_scene(small_scene_dir):
    return load_scene(small_scene_dir)
