"""
장면 디렉터리 로더
학습 전(step 0 이전)에 모든 파일을 읽고 검증. 실패하면 AppError 계열 예외
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from src import constants as C
from src.features import DescriptorConfig, FeatureMap, extract_features, load_feature_maps
from src.geometry import Camera, near_far_from_sphere, pixel_directions
from src.losses import DepthPrior, SparseKeypoints, calibrate_depth
from src.scene_io import read_cameras, read_image, read_keypoints, read_pf2
from src.synth import AnalyticScene, KeypointSet
from src.utils import AppError, SceneFormatError, load_json_safe

logger = logging.getLogger(__name__)


@dataclass
class ViewData:
    name: str
    camera: Camera
    image: np.ndarray                          # [H,W,3] float32
    feature_map: FeatureMap
    depth_prior: Optional[DepthPrior] = None
    depth_gt: Optional[np.ndarray] = None
    keypoints: Optional[SparseKeypoints] = None
    _image_tensor: Dict = field(default_factory=dict, init=False, repr=False)

    def image_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """[3,H,W]"""
        if dtype not in self._image_tensor:
            self._image_tensor[dtype] = torch.as_tensor(self.image.transpose(2, 0, 1).copy(), dtype=dtype)
        return self._image_tensor[dtype]

    def valid_pixels(self, dtype=torch.float32) -> torch.Tensor:
        """광선이 장면 경계 구를 지나는 픽셀 [M,2]"""
        h, w = self.image.shape[:2]
        v, u = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
        pixels = torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)
        dirs = pixel_directions(pixels, self.camera)
        origins = torch.as_tensor(self.camera.center, dtype=dtype).expand_as(dirs)
        _, _, hit = near_far_from_sphere(origins, dirs, C.SCENE_BOUND_RADIUS)
        return pixels[hit]


@dataclass
class SceneData:
    root: Path
    views: List[ViewData]
    keypoints: Optional[KeypointSet] = None
    analytic: Optional[AnalyticScene] = None

    def __len__(self) -> int:
        return len(self.views)

    @property
    def cameras(self) -> List[Camera]:
        return [v.camera for v in self.views]

    @property
    def has_priors(self) -> bool:
        return any(v.depth_prior is not None for v in self.views)


def _resolve(root: Path, rel: Optional[str]) -> Optional[Path]:
    if rel is None:
        return None
    path = root / rel
    if not path.exists():
        raise AppError(f"장면 파일이 없습니다: {path}")
    return path


def load_scene(scene_dir: Path, feature_scale: float = 0.5, calibrate: bool = True) -> SceneData:
    """
    cameras.json 기준으로 이미지/특징맵/깊이 사전/키포인트를 모두 읽음

    - feature_map이 없으면 내장 디스크립터로 계산
    - 키포인트가 없으면 깊이 보정은 (1, 0)으로 대체 (degenerate)
    - scene.json이 있으면 해석적 장면도 함께 로드 (평가용 기준 점군)
    """
    root = Path(scene_dir)
    if not root.is_dir():
        raise AppError(f"장면 디렉터리가 없습니다: {root}")
    records = read_cameras(root / C.CAMERAS_FILE)

    keypoints = None
    kp_path = root / C.KEYPOINTS_FILE
    if kp_path.exists():
        points, visibility = read_keypoints(kp_path)
        bad = [v for vis in visibility for v in vis if v >= len(records)]
        if bad:
            raise SceneFormatError(kp_path, f"존재하지 않는 시점 인덱스: {sorted(set(bad))}")
        keypoints = KeypointSet(points, visibility)
    else:
        logger.info("keypoints 파일이 없습니다. 깊이 보정은 a=1, b=0으로 대체됩니다.")

    views: List[ViewData] = []
    for i, rec in enumerate(records):
        image = read_image(_resolve(root, rec.image))
        h, w = image.shape[:2]
        if (w, h) != (rec.camera.width, rec.camera.height):
            raise SceneFormatError(root / C.CAMERAS_FILE,
                                   f"{rec.name}: 이미지 크기 {w}x{h}가 카메라 {rec.camera.width}x{rec.camera.height}와 다릅니다")

        fm_path = _resolve(root, rec.feature_map)
        fmap = load_feature_maps(fm_path) if fm_path else extract_features(image, DescriptorConfig(scale=feature_scale))

        prior = None
        prior_path = _resolve(root, rec.depth_prior)
        if prior_path is not None:
            prior_map = read_pf2(prior_path)
            if prior_map.shape != (h, w):
                raise SceneFormatError(prior_path, f"깊이 사전 크기 {prior_map.shape}가 이미지 {(h, w)}와 다릅니다")
            prior = DepthPrior(prior_map)

        gt_path = _resolve(root, rec.depth_gt)
        depth_gt = read_pf2(gt_path) if gt_path is not None else None

        kps = keypoints.for_view(i, rec.camera) if keypoints is not None else None
        if prior is not None and calibrate:
            cal = calibrate_depth(prior, kps)
            prior.a, prior.b, prior.degenerate = cal.a, cal.b, cal.degenerate
            logger.info(f"{rec.name}: 깊이 보정 a={cal.a:.6g} b={cal.b:.6g}"
                        + (" (degenerate)" if cal.degenerate else f" (키포인트 {len(kps)}개)"))
        views.append(ViewData(rec.name, rec.camera, image, fmap, prior, depth_gt, kps))

    if len(views) < 2:
        logger.warning("시점이 1개뿐이라 교차 시점 손실(특징/깊이 신뢰도/워핑)은 비활성화됩니다.")

    analytic = None
    scene_json = root / C.SCENE_FILE
    if scene_json.exists():
        doc = load_json_safe(scene_json)
        try:
            analytic = AnalyticScene.from_dict(doc["scene"])
        except (KeyError, ValueError, TypeError) as e:
            raise SceneFormatError(scene_json, f"장면 정의 오류: {e}") from e

    return SceneData(root=root, views=views, keypoints=keypoints, analytic=analytic)
