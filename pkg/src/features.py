"""
특징맵 생성/로드, 쌍선형 샘플링, 유사도

내장 디스크립터 (24채널 = 2 스케일 x (밝기 1 + 기울기 2 + 3x3 패치 9))
- 스케일 1: 원본 밝기, 스텐실 간격 1
- 스케일 2: 가우시안(σ=2) 스케일 공간, 스텐실 간격 2 (해상도는 그대로)
- 경계는 wrap 처리 -> 정수 이동에 대해 정확히 공변
- 밝기 채널만 평균 0으로 센터링 (나머지는 구성상 평균 0)
- 마지막에 scale 배 해상도로 INTER_AREA 리샘플
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union

import cv2
import numpy as np
import torch
from scipy import ndimage

from src import constants as C
from src.geometry import OUT_OF_VIEW, OutOfView
from src.scene_io import read_fmap, read_image, write_fmap

logger = logging.getLogger(__name__)

SIMILARITY_METRICS = ("cos", "l1", "l2")
_LUMA = np.array([0.299, 0.587, 0.114])


# =========================================================
# 1) FeatureMap
# =========================================================
@dataclass
class FeatureMap:
    """data: [C,H,W] float32, scale: 이미지 대비 해상도 비율"""
    data: np.ndarray
    scale: float = 1.0
    _tensors: Dict[Tuple[torch.dtype, torch.device], torch.Tensor] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        self.data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if self.data.ndim != 3:
            raise ValueError(f"FeatureMap은 [C,H,W]여야 합니다: {self.data.shape}")
        if not any(abs(self.scale - s) < 1e-9 for s in C.ALLOWED_FEATURE_SCALES):
            raise ValueError(f"허용되지 않는 scale: {self.scale}")
        if not np.isfinite(self.data).all():
            raise ValueError("FeatureMap에 유한하지 않은 값이 있습니다.")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def tensor(self, like: torch.Tensor) -> torch.Tensor:
        key = (like.dtype, like.device)
        if key not in self._tensors:
            self._tensors[key] = torch.as_tensor(self.data, dtype=like.dtype, device=like.device)
        return self._tensors[key]

    def to_map_coords(self, pixels: torch.Tensor) -> torch.Tensor:
        """이미지 픽셀 -> 맵 좌표, q = (p + 0.5) s - 0.5"""
        return (pixels + 0.5) * self.scale - 0.5

    def sample(self, pixels: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """이미지 픽셀 좌표에서 샘플. ([...,C], valid [...])"""
        return bilinear_sample(self.tensor(pixels), self.to_map_coords(pixels))

    @classmethod
    def from_image_file(cls, path: Path, scale: float = 0.5) -> "FeatureMap":
        return extract_features(read_image(path), DescriptorConfig(scale=scale))


@dataclass
class DescriptorConfig:
    scale: float = 0.5
    sigma: float = 2.0
    coarse_step: int = 2


# =========================================================
# 2) 내장 디스크립터
# =========================================================
def _to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            return img[..., 0]
        return img[..., :3] @ _LUMA
    return img


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = img[y + dy, x + dx] (wrap)"""
    return np.roll(img, shift=(-dy, -dx), axis=(0, 1))


def _scale_channels(img: np.ndarray, step: int) -> list:
    gx = (_shift(img, 0, step) - _shift(img, 0, -step)) / (2.0 * step)
    gy = (_shift(img, step, 0) - _shift(img, -step, 0)) / (2.0 * step)
    patch = [_shift(img, dy * step, dx * step) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    local_mean = sum(patch) / 9.0
    return [img - img.mean(), gx, gy] + [p - local_mean for p in patch]


def extract_features(image: np.ndarray, config: DescriptorConfig = None) -> FeatureMap:
    """
    결정적 내장 디스크립터 (사전학습 MVS 특징 대용)

    Args:
        image: [H,W] 또는 [H,W,3], 값 범위 무관
    Returns:
        24채널 FeatureMap
    """
    config = config or DescriptorConfig()
    if image is None or np.asarray(image).size == 0:
        raise ValueError("빈 이미지입니다.")
    gray = _to_gray(image)
    if gray.ndim != 2 or min(gray.shape) < 16:
        raise ValueError(f"이미지 크기는 16 이상이어야 합니다: {gray.shape}")

    coarse = ndimage.gaussian_filter(gray, sigma=config.sigma, mode="wrap")
    channels = _scale_channels(gray, 1) + _scale_channels(coarse, config.coarse_step)
    stack = np.stack(channels, axis=0).astype(np.float32)

    if abs(config.scale - 1.0) > 1e-9:
        h, w = gray.shape
        size = (max(1, int(round(w * config.scale))), max(1, int(round(h * config.scale))))
        hwc = np.ascontiguousarray(stack.transpose(1, 2, 0))
        resized = cv2.resize(hwc, size, interpolation=cv2.INTER_AREA)
        stack = resized.transpose(2, 0, 1)
    return FeatureMap(stack, scale=config.scale)


# =========================================================
# 3) 쌍선형 샘플링
# =========================================================
def bilinear_sample(data: torch.Tensor, coords: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    data [C,H,W], coords [...,2] (맵 좌표, 정수가 텍셀 중심)

    Returns:
        (values [...,C], valid [...]). 반 픽셀 테두리 밖은 valid=False, 값은 가장자리 확장
    """
    _, h, w = data.shape
    x, y = coords[..., 0], coords[..., 1]
    valid = (x >= -0.5) & (x <= w - 0.5) & (y >= -0.5) & (y <= h - 0.5)
    valid = valid & torch.isfinite(x) & torch.isfinite(y)

    x = torch.nan_to_num(x).clamp(0, w - 1)
    y = torch.nan_to_num(y).clamp(0, h - 1)
    x0 = torch.floor(x).clamp(max=w - 2 if w > 1 else 0)
    y0 = torch.floor(y).clamp(max=h - 2 if h > 1 else 0)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0l, y0l = x0.long(), y0.long()
    x1l, y1l = (x0l + 1).clamp(max=w - 1), (y0l + 1).clamp(max=h - 1)

    flat = data.reshape(data.shape[0], -1).T  # [H*W, C]

    def gather(yy, xx):
        return flat[(yy * w + xx).reshape(-1)].reshape(*xx.shape, -1)

    v00, v01 = gather(y0l, x0l), gather(y0l, x1l)
    v10, v11 = gather(y1l, x0l), gather(y1l, x1l)
    top = v00 * (1 - fx) + v01 * fx
    bottom = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bottom * fy, valid


def sample_bilinear(fmap: FeatureMap, pixel) -> Union[np.ndarray, OutOfView]:
    """이미지 픽셀 하나에서 C-벡터. 범위 밖이면 OUT_OF_VIEW"""
    p = torch.as_tensor(np.asarray(pixel, dtype=np.float64).reshape(2))
    values, valid = fmap.sample(p)
    return values.numpy() if bool(valid) else OUT_OF_VIEW


# =========================================================
# 4) 유사도
# =========================================================
def cosine_similarity(a, b, eps: float = C.COSINE_EPS) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < eps or nb < eps:
        return 0.0
    return float(np.clip(a @ b / (na * nb + eps), -1.0, 1.0))


def similarity(a: torch.Tensor, b: torch.Tensor, metric: str = "cos", eps: float = C.COSINE_EPS) -> torch.Tensor:
    """
    마지막 축 기준 배치 유사도
    - cos: a·b / (|a||b| + eps), 한쪽 노름 < eps이면 0
    - l1: -|a - b|_1 / C
    - l2: -|a - b|_2
    """
    if metric == "cos":
        na = torch.linalg.norm(a, dim=-1)
        nb = torch.linalg.norm(b, dim=-1)
        cos = (a * b).sum(-1) / (na * nb + eps)
        return torch.where((na < eps) | (nb < eps), torch.zeros_like(cos), cos.clamp(-1.0, 1.0))
    if metric == "l1":
        return -(a - b).abs().sum(-1) / a.shape[-1]
    if metric == "l2":
        return -torch.linalg.norm(a - b, dim=-1)
    raise ValueError(f"알 수 없는 유사도: {metric} (가능: {SIMILARITY_METRICS})")


# =========================================================
# 5) 파일 입출력
# =========================================================
def load_feature_maps(path: Path) -> FeatureMap:
    data, scale = read_fmap(path)
    return FeatureMap(data, scale=scale)


def save_feature_map(path: Path, fmap: FeatureMap) -> None:
    write_fmap(path, fmap.data, fmap.scale)
