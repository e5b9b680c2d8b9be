"""
전체 이미지(간격 stride) 진단 맵
- depth: 렌더 깊이 (광선 거리)
- confidence: source 시점별 순방향-역방향 신뢰도의 최솟값
- similarity: 가중 특징 유사도 Σ w sim 의 source 평균
미스 픽셀(경계 구 밖 또는 weight_sum < 0.01)은 모든 맵에서 NaN
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from src import constants as C
from src.geometry import Camera, generate_rays, near_far_from_sphere, pixel_directions
from src.losses import depth_confidence_batch, sample_similarities
from src.pipeline.scene import SceneData
from src.rendering import render_depth, render_feature_similarity, to_sections
from src.scene_io import write_pf2

logger = logging.getLogger(__name__)


@dataclass
class MapSet:
    depth: np.ndarray
    confidence: np.ndarray
    similarity: np.ndarray

    def save(self, out_dir: Path, prefix: str) -> None:
        write_pf2(Path(out_dir) / f"{prefix}_depth.pf2", self.depth)
        write_pf2(Path(out_dir) / f"{prefix}_confidence.pf2", self.confidence)
        write_pf2(Path(out_dir) / f"{prefix}_similarity.pf2", self.similarity)


def rays_for_pixels(camera: Camera, pixels: torch.Tensor):
    """경계 구와 만나는 픽셀만 광선으로. (RayBatch 또는 None, hit [M])"""
    dirs = pixel_directions(pixels, camera)
    origins = torch.as_tensor(camera.center, dtype=pixels.dtype).expand_as(dirs)
    near, far, hit = near_far_from_sphere(origins, dirs, C.SCENE_BOUND_RADIUS)
    if not bool(hit.any()):
        return None, hit
    return generate_rays(camera, pixels[hit], near[hit], far[hit]), hit


def make_source_depth_fn(field, camera: Camera, n_coarse: int, n_importance: int,
                         generator: Optional[torch.Generator] = None, perturb: bool = True):
    """source 픽셀 -> (렌더 깊이, valid). 경계 구를 빗나가면 invalid"""

    def fn(pixels: torch.Tensor):
        depth = torch.full((len(pixels),), float("nan"), dtype=pixels.dtype, device=pixels.device)
        valid = torch.zeros(len(pixels), dtype=torch.bool, device=pixels.device)
        rays, hit = rays_for_pixels(camera, pixels)
        if rays is None:
            return depth, valid
        res = render_depth(field, rays, n_coarse, n_importance, generator, perturb)
        depth[hit] = res.rendered_depth
        valid[hit] = res.valid
        return depth, valid

    return fn


def render_maps(field, scene: SceneData, view_index: int, stride: int = 1, chunk: int = 1024,
                n_coarse: int = C.N_COARSE, n_importance: int = C.N_IMPORTANCE, metric: str = "cos") -> MapSet:
    """맵 크기는 ceil(H/stride) x ceil(W/stride). 샘플링은 결정적(perturb 없음)"""
    if stride < 1:
        raise ValueError(f"stride는 1 이상이어야 합니다: {stride}")
    view = scene.views[view_index]
    cam = view.camera
    dtype = next(field.parameters()).dtype
    hs, ws = math.ceil(cam.height / stride), math.ceil(cam.width / stride)
    v, u = torch.meshgrid(torch.arange(0, cam.height, stride, dtype=dtype),
                          torch.arange(0, cam.width, stride, dtype=dtype), indexing="ij")
    pixels = torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)

    depth = np.full(len(pixels), np.nan)
    conf = np.full(len(pixels), np.nan)
    sim = np.full(len(pixels), np.nan)
    sources = [i for i in range(len(scene)) if i != view_index]
    depth_fns = {i: make_source_depth_fn(field, scene.views[i].camera, n_coarse, n_importance, perturb=False)
                 for i in sources}

    for start in range(0, len(pixels), chunk):
        px = pixels[start:start + chunk]
        rays, hit = rays_for_pixels(cam, px)
        if rays is None:
            continue
        res = render_depth(field, rays, n_coarse, n_importance, perturb=False)
        ok = res.valid
        idx = start + torch.nonzero(hit).squeeze(-1)[ok].numpy()
        depth[idx] = res.rendered_depth[ok].double().numpy()
        if not sources:
            continue

        ref_feat, _ = view.feature_map.sample(rays.pixels)
        confs, sims = [], []
        for i in sources:
            src = scene.views[i]
            c = depth_confidence_batch(rays.pixels, res.rendered_depth, cam, src.camera, depth_fns[i])
            confs.append(c.confidence)
            per_sample = sample_similarities(res.samples.points, ref_feat, src.feature_map, src.camera, metric)
            sims.append(render_feature_similarity(res.weights, to_sections(per_sample)[:, None, :])[:, 0])
        conf[idx] = torch.stack(confs, -1).min(-1).values[ok].double().numpy()
        sim[idx] = torch.stack(sims, -1).mean(-1)[ok].double().numpy()

    shape = (hs, ws)
    return MapSet(depth.reshape(shape), conf.reshape(shape), sim.reshape(shape))
