"""
해석적 합성 장면
- 구/박스 프리미티브, 합집합(min) 또는 soft-min 블렌드
- 스피어 트레이싱 기준 렌더 (깊이 = 광선 거리, 미스는 NaN)
- 원뿔 위 카메라 리그 (인접 시점 광축 사이 각도 지정)
- 알려진 (a, b)의 역변환 + 매끈한 왜곡을 가진 단안 깊이 사전
- 표면 키포인트 + 스피어 트레이싱 가시성 (COLMAP 대용)

soft-min 블렌드: f = -k log Σ exp(-f_i / k)
  min(f_i) - k log(n) <= f <= min(f_i) 인 근사이며 블렌드 영역 근처에서는 정확한 거리가 아님
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src import constants as C
from src.geometry import Camera, look_at, near_far_from_sphere, pixel_directions, project_points
from src.losses import DepthPrior, SparseKeypoints
from src.scene_io import (ViewRecord, write_cameras, write_image, write_keypoints, write_pf2)
from src.utils import ensure_dir, save_json_safe

logger = logging.getLogger(__name__)

TEXTURES = ("checker", "ramp", "flat")


# =========================================================
# 1) 프리미티브 / 장면
# =========================================================
@dataclass
class Sphere:
    center: Tuple[float, float, float]
    radius: float

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        c = torch.as_tensor(self.center, dtype=p.dtype, device=p.device)
        return torch.linalg.norm(p - c, dim=-1) - self.radius

    def bound(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius

    def to_dict(self) -> Dict:
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass
class Box:
    center: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        c = torch.as_tensor(self.center, dtype=p.dtype, device=p.device)
        h = torch.as_tensor(self.half_extents, dtype=p.dtype, device=p.device)
        q = (p - c).abs() - h
        outside = torch.linalg.norm(torch.clamp(q, min=0.0), dim=-1)
        inside = torch.clamp(q.max(dim=-1).values, max=0.0)
        return outside + inside

    def bound(self) -> float:
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.half_extents))

    def to_dict(self) -> Dict:
        return {"type": "box", "center": list(self.center), "half_extents": list(self.half_extents)}


Primitive = Union[Sphere, Box]


@dataclass
class AnalyticScene:
    """
    primitives: 프리미티브 목록
    blend: 0이면 min 합집합, > 0이면 soft-min 반경
    texture: checker / ramp / flat (flat은 저텍스처 장면용)
    """
    primitives: List[Primitive]
    blend: float = 0.0
    texture: str = "checker"
    bound_radius: float = C.SCENE_BOUND_RADIUS

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("프리미티브가 하나 이상 필요합니다.")
        if self.texture not in TEXTURES:
            raise ValueError(f"알 수 없는 텍스처: {self.texture} (가능: {TEXTURES})")
        for prim in self.primitives:
            if prim.bound() > self.bound_radius + 1e-12:
                raise ValueError(f"프리미티브가 장면 경계 밖으로 나갑니다: {prim}")

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        values = torch.stack([prim.sdf(p) for prim in self.primitives], dim=-1)
        if len(self.primitives) == 1:
            return values[..., 0]
        if self.blend <= 0:
            return values.min(dim=-1).values
        k = self.blend
        return -k * torch.logsumexp(-values / k, dim=-1)

    def normal(self, p: torch.Tensor) -> torch.Tensor:
        with torch.enable_grad():
            x = p.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(self.sdf(x).sum(), x)
        return g / torch.clamp(torch.linalg.norm(g, dim=-1, keepdim=True), min=1e-12)

    def albedo(self, p: torch.Tensor) -> torch.Tensor:
        if self.texture == "checker":
            cells = torch.floor(4.0 * p).sum(-1)
            on = torch.remainder(cells, 2.0)
            base = torch.as_tensor((0.85, 0.55, 0.35), dtype=p.dtype, device=p.device)
            return base * (0.35 + 0.65 * on[..., None])
        if self.texture == "ramp":
            x, y, z = p[..., 0], p[..., 1], p[..., 2]
            return torch.stack([0.5 + 0.4 * torch.sin(6.0 * x), 0.5 + 0.4 * torch.sin(5.0 * y + 1.0),
                                0.5 + 0.4 * torch.sin(7.0 * z + 2.0)], dim=-1)
        flat = 0.6 + 0.01 * torch.sin(3.0 * p[..., 0])
        return torch.stack([flat, flat, flat], dim=-1)

    def to_dict(self) -> Dict:
        return {"primitives": [prim.to_dict() for prim in self.primitives], "blend": self.blend,
                "texture": self.texture, "bound_radius": self.bound_radius}

    @classmethod
    def from_dict(cls, d: Dict) -> "AnalyticScene":
        prims: List[Primitive] = []
        for pd in d["primitives"]:
            if pd["type"] == "sphere":
                prims.append(Sphere(tuple(pd["center"]), float(pd["radius"])))
            elif pd["type"] == "box":
                prims.append(Box(tuple(pd["center"]), tuple(pd["half_extents"])))
            else:
                raise ValueError(f"알 수 없는 프리미티브: {pd['type']}")
        return cls(prims, blend=float(d.get("blend", 0.0)), texture=d.get("texture", "checker"),
                   bound_radius=float(d.get("bound_radius", C.SCENE_BOUND_RADIUS)))


def scene_sdf(scene: AnalyticScene, point) -> Union[float, np.ndarray]:
    """numpy 입력용. 점 하나면 float, 배치면 배열"""
    p = torch.as_tensor(np.asarray(point, dtype=np.float64))
    out = scene.sdf(p).numpy()
    return float(out) if out.ndim == 0 else out


# =========================================================
# 2) 스피어 트레이싱 / 기준 렌더
# =========================================================
def trace_rays(scene: AnalyticScene, origins: torch.Tensor, directions: torch.Tensor,
               max_steps: int = C.SPHERE_TRACE_STEPS, eps: float = C.SPHERE_TRACE_EPS) -> torch.Tensor:
    """
    경계 구 안에서 스피어 트레이싱
    Returns:
        [R] 광선 거리, 미스는 NaN
    """
    origins = origins.to(torch.float64)
    directions = directions.to(torch.float64)
    near, far, hit_bound = near_far_from_sphere(origins, directions, scene.bound_radius)
    t = near.clone()
    active = hit_bound.clone()
    hit = torch.zeros_like(active)
    for _ in range(max_steps):
        if not bool(active.any()):
            break
        d = scene.sdf(origins[active] + directions[active] * t[active, None])
        idx = torch.nonzero(active).squeeze(-1)
        converged = d.abs() < eps
        hit[idx[converged]] = True
        t[idx] = t[idx] + torch.where(converged, torch.zeros_like(d), d)
        escaped = t[idx] > far[idx]
        active[idx[converged | escaped]] = False
    return torch.where(hit, t, torch.full_like(t, float("nan")))


def _pixel_grid(camera: Camera) -> torch.Tensor:
    v, u = torch.meshgrid(torch.arange(camera.height, dtype=torch.float64),
                          torch.arange(camera.width, dtype=torch.float64), indexing="ij")
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)


def shade(scene: AnalyticScene, points: torch.Tensor) -> torch.Tensor:
    """albedo x (ambient + 방향광 Lambert)"""
    light = torch.as_tensor(C.LIGHT_DIRECTION, dtype=points.dtype)
    light = light / torch.linalg.norm(light)
    lambert = torch.clamp(scene.normal(points) @ light, min=0.0)
    return torch.clamp(scene.albedo(points) * (C.AMBIENT + (1.0 - C.AMBIENT) * lambert[..., None]), 0.0, 1.0)


def render_ground_truth(scene: AnalyticScene, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """(image [H,W,3] in [0,1], depth [H,W] 광선 거리, 미스 NaN)"""
    pixels = _pixel_grid(camera)
    dirs = pixel_directions(pixels, camera)
    origins = torch.as_tensor(camera.center).expand_as(dirs)
    dist = trace_rays(scene, origins, dirs)

    image = torch.zeros((len(pixels), 3), dtype=torch.float64)
    hit = torch.isfinite(dist)
    if bool(hit.any()):
        points = origins[hit] + dirs[hit] * dist[hit, None]
        image[hit] = shade(scene, points)
    h, w = camera.height, camera.width
    return image.reshape(h, w, 3).numpy(), dist.reshape(h, w).numpy()


# =========================================================
# 3) 카메라 리그
# =========================================================
def make_camera_rig(n_views: int, radius: float, max_angle_deg: float, image_size, focal: float) -> List[Camera]:
    """
    z축을 중심으로 한 원뿔 위 카메라, 방위각 2πk/n, 모두 원점을 바라봄
    원뿔 반각은 인접 시점 광축 사이 각도가 max_angle_deg가 되도록 결정 (n=3이면 모든 쌍)
    """
    if n_views < 2:
        raise ValueError(f"n_views는 2 이상이어야 합니다: {n_views}")
    if radius <= C.SCENE_BOUND_RADIUS:
        raise ValueError(f"카메라 반지름은 장면 경계({C.SCENE_BOUND_RADIUS})보다 커야 합니다: {radius}")
    gamma = math.radians(max_angle_deg)
    if not 0 < gamma < math.pi:
        raise ValueError(f"각도 범위 오류: {max_angle_deg}")
    sin2 = (1.0 - math.cos(gamma)) / (1.0 - math.cos(2.0 * math.pi / n_views))
    if sin2 > 1.0:
        raise ValueError(f"{n_views}개 시점으로 {max_angle_deg}° 간격을 만들 수 없습니다.")
    theta = math.asin(math.sqrt(sin2))

    width, height = (image_size, image_size) if isinstance(image_size, int) else image_size
    K = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    cameras = []
    for k in range(n_views):
        phi = 2.0 * math.pi * k / n_views
        center = radius * np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi),
                                    math.cos(theta)])
        R, t = look_at(center)
        cameras.append(Camera(K, R, t, width, height))
    return cameras


# =========================================================
# 4) 깊이 사전 / 키포인트
# =========================================================
def smooth_field(height: int, width: int) -> np.ndarray:
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.sin(2.0 * np.pi * 1.5 * u / width) * np.cos(2.0 * np.pi * v / height)


def synthesize_depth_prior(gt_depth: np.ndarray, a_true: float, b_true: float,
                           distortion_amp: float = 0.0) -> DepthPrior:
    """D̂ = (D_gt - b) / a + amp * smooth(pixel). NaN(미스)는 그대로 유지"""
    if not a_true > 0:
        raise ValueError(f"a_true는 양수여야 합니다: {a_true}")
    gt = np.asarray(gt_depth, dtype=np.float64)
    prior = (gt - b_true) / a_true + distortion_amp * smooth_field(*gt.shape)
    return DepthPrior(prior)


def sample_surface_points(scene: AnalyticScene, n: int, rng: np.random.Generator,
                          max_newton: int = 50, tol: float = 1e-9) -> np.ndarray:
    """경계 구 안 균일 점을 뉴턴 투영으로 표면에 올림. [n,3]"""
    out: List[np.ndarray] = []
    total = 0
    while total < n:
        batch = max(64, 2 * (n - total))
        p = rng.normal(size=(batch, 3))
        p *= (rng.uniform(size=(batch, 1)) ** (1.0 / 3.0)) * scene.bound_radius / np.linalg.norm(p, axis=1,
                                                                                                 keepdims=True)
        x = torch.as_tensor(p)
        for _ in range(max_newton):
            with torch.enable_grad():
                xr = x.detach().requires_grad_(True)
                f = scene.sdf(xr)
                (g,) = torch.autograd.grad(f.sum(), xr)
            g2 = (g * g).sum(-1).clamp(min=1e-12)
            x = (x - (f.detach() / g2)[:, None] * g).detach()
        f = scene.sdf(x)
        ok = (f.abs() < tol) & (torch.linalg.norm(x, dim=-1) < scene.bound_radius)
        good = x[ok].numpy()
        out.append(good)
        total += len(good)
    return np.concatenate(out, axis=0)[:n]


@dataclass
class KeypointSet:
    """world 점 [P,3]와 점별 가시 시점 인덱스"""
    points: np.ndarray
    visibility: List[Tuple[int, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    def for_view(self, view_index: int, camera: Camera) -> SparseKeypoints:
        return SparseKeypoints.from_points(self.points, self.visibility, view_index, camera)


def visible_from(scene: AnalyticScene, points: np.ndarray, camera: Camera, tol: float = 1e-4) -> np.ndarray:
    """카메라에서 점까지 스피어 트레이싱한 첫 교차가 그 점이면 가시"""
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64))
    center = torch.as_tensor(camera.center)
    delta = pts - center
    dist = torch.linalg.norm(delta, dim=-1)
    dirs = delta / dist[:, None]
    hit = trace_rays(scene, center.expand_as(dirs), dirs)
    _, in_view = project_points(pts, camera)
    return (in_view & torch.isfinite(hit) & ((hit - dist).abs() < tol)).numpy()


def synthesize_keypoints(scene: AnalyticScene, cameras: Sequence[Camera], n_points: int,
                         rng: np.random.Generator, min_views: int = 2, max_rounds: int = 20) -> KeypointSet:
    """표면점 중 min_views개 이상 시점에서 보이는 점만 채택"""
    if n_points < 2:
        raise ValueError(f"n_points는 2 이상이어야 합니다: {n_points}")
    points: List[np.ndarray] = []
    visibility: List[Tuple[int, ...]] = []
    for _ in range(max_rounds):
        cand = sample_surface_points(scene, 4 * n_points, rng)
        vis = np.stack([visible_from(scene, cand, cam) for cam in cameras], axis=1)
        for p, row in zip(cand, vis):
            if row.sum() >= min_views:
                points.append(p)
                visibility.append(tuple(int(i) for i in np.nonzero(row)[0]))
                if len(points) == n_points:
                    return KeypointSet(np.asarray(points), visibility)
    logger.warning(f"가시 키포인트가 부족합니다: {len(points)}/{n_points}")
    return KeypointSet(np.asarray(points).reshape(-1, 3), visibility)


# =========================================================
# 5) 프리셋 / 장면 디렉터리 쓰기
# =========================================================
@dataclass
class SynthPreset:
    name: str
    scene: AnalyticScene
    n_views: int = 3
    angle_deg: float = 45.0
    image_size: int = 96
    focal: float = 80.0
    radius: float = 2.0
    prior_a: float = 2.0
    prior_b: float = 0.3
    prior_amp: float = 0.05
    n_keypoints: int = 64


def get_preset(name: str) -> SynthPreset:
    if name == "sphere3":
        return SynthPreset(name, AnalyticScene([Sphere((0.0, 0.0, 0.0), 0.5)], texture="checker"))
    if name == "spherebox3":
        scene = AnalyticScene([Sphere((-0.2, 0.0, 0.0), 0.35), Box((0.3, 0.0, 0.0), (0.25, 0.25, 0.25))],
                              blend=0.05, texture="ramp")
        return SynthPreset(name, scene)
    if name == "lowtex3":
        return SynthPreset(name, AnalyticScene([Sphere((0.0, 0.0, 0.0), 0.5)], texture="flat"))
    if name == "sphere3-wide":
        return SynthPreset(name, AnalyticScene([Sphere((0.0, 0.0, 0.0), 0.5)], texture="checker"), angle_deg=15.0)
    raise ValueError(f"알 수 없는 프리셋: {name} (가능: {C.SYNTH_PRESETS})")


def write_scene(preset: SynthPreset, out_dir: Path, seed: int = 0) -> Path:
    """images/*.png, depth_gt/*.pf2, priors/*.pf2, cameras.json, keypoints.txt, scene.json"""
    out_dir = ensure_dir(Path(out_dir))
    rng = np.random.default_rng(seed)
    cameras = make_camera_rig(preset.n_views, preset.radius, preset.angle_deg, preset.image_size, preset.focal)

    records = []
    for i, cam in enumerate(cameras):
        name = f"view{i:02d}"
        image, depth = render_ground_truth(preset.scene, cam)
        prior = synthesize_depth_prior(depth, preset.prior_a, preset.prior_b, preset.prior_amp)
        rec = ViewRecord(name=name, camera=cam, image=f"{C.IMAGES_DIR}/{name}.png",
                         depth_prior=f"{C.PRIORS_DIR}/{name}.pf2", depth_gt=f"{C.DEPTH_GT_DIR}/{name}.pf2")
        write_image(out_dir / rec.image, image)
        write_pf2(out_dir / rec.depth_gt, depth)
        write_pf2(out_dir / rec.depth_prior, prior.map)
        records.append(rec)
        logger.info(f"{name}: 적중 픽셀 {int(np.isfinite(depth).sum())}/{depth.size}")

    keypoints = synthesize_keypoints(preset.scene, cameras, preset.n_keypoints, rng)
    write_cameras(out_dir / C.CAMERAS_FILE, records)
    write_keypoints(out_dir / C.KEYPOINTS_FILE, keypoints.points, keypoints.visibility)
    save_json_safe(out_dir / C.SCENE_FILE, {
        "preset": preset.name, "seed": seed, "scene": preset.scene.to_dict(),
        "rig": {"n_views": preset.n_views, "angle_deg": preset.angle_deg, "image_size": preset.image_size,
                "focal": preset.focal, "radius": preset.radius},
        "prior": {"a": preset.prior_a, "b": preset.prior_b, "amp": preset.prior_amp},
    })
    logger.info(f"장면 저장 완료: {out_dir} (키포인트 {len(keypoints)}개)")
    return out_dir
