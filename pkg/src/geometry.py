"""
카메라 모델 / 투영 / 역투영 / 광선 생성 / 시점 간 재투영

픽셀 좌표 규약:
- 픽셀 중심이 정수 좌표, (0, 0)은 좌상단 픽셀의 중심
- 화면 안 판정은 [0, width) x [0, height)
- 카메라 좌표계는 OpenCV 규약 (x 오른쪽, y 아래, z 전방)
- "depth"라는 이름의 인자는 카메라 좌표계 z 값, "distance"는 단위 광선을 따른 거리
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Tuple, Union

import numpy as np
import torch


class OutOfView:
    """투영이 화면(또는 카메라 전방) 밖. 실패가 아니라 값 수준의 신호"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return "OUT_OF_VIEW"


OUT_OF_VIEW = OutOfView()


# =========================================================
# 1) Camera
# =========================================================
@dataclass
class Camera:
    """K(3x3, 픽셀), R(3x3, world->camera), t(3, world 단위), 이미지 크기"""
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    _cache: Dict[Tuple[torch.dtype, torch.device], Tuple[torch.Tensor, ...]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)

        if self.width < 2 or self.height < 2:
            raise ValueError(f"이미지 크기는 2 이상이어야 합니다: {self.width}x{self.height}")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6) or np.linalg.det(self.R) <= 0:
            raise ValueError("R은 det=+1인 직교 행렬이어야 합니다.")
        if abs(self.K[1, 0]) > 0 or abs(self.K[2, 0]) > 0 or abs(self.K[2, 1]) > 0:
            raise ValueError("K는 상삼각 행렬이어야 합니다.")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K의 초점거리 성분은 양수여야 합니다.")

    @property
    def center(self) -> np.ndarray:
        """카메라 중심 -R^T t"""
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        """world 좌표계 광축 (R^T의 세 번째 열 = R의 세 번째 행)"""
        return self.R[2].copy()

    @property
    def projection_matrix(self) -> np.ndarray:
        """M = K [R | t] (3x4)"""
        return self.K @ np.concatenate([self.R, self.t[:, None]], axis=1)

    def tensors(self, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """(K, K^-1, R, t)를 like와 같은 dtype/device 텐서로"""
        key = (like.dtype, like.device)
        if key not in self._cache:
            self._cache[key] = tuple(
                torch.as_tensor(a, dtype=like.dtype, device=like.device)
                for a in (self.K, np.linalg.inv(self.K), self.R, self.t)
            )
        return self._cache[key]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.K.reshape(-1).tolist(),
            "R": self.R.reshape(-1).tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Camera":
        return cls(
            K=np.asarray(d["K"], dtype=np.float64).reshape(3, 3),
            R=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            t=np.asarray(d["t"], dtype=np.float64).reshape(3),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> Tuple[np.ndarray, np.ndarray]:
    """center에서 target을 바라보는 (R, t). 광축 +z, 이미지 y는 아래 방향"""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(forward @ up)) > 1.0 - 1e-9:
        up = np.array([0.0, 0.0, 1.0]) if abs(forward[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    t = -R @ center
    return R, t


# =========================================================
# 2) 투영 / 역투영 (배치, torch)
# =========================================================
def in_image(pixels: torch.Tensor, camera: Camera) -> torch.Tensor:
    u, v = pixels[..., 0], pixels[..., 1]
    return (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)


def project_points(points: torch.Tensor, camera: Camera) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    world 점 -> 픽셀

    Returns:
        (pixels [...,2], in_view [...] bool). 화면 밖/카메라 뒤는 in_view=False
    """
    K, _, R, t = camera.tensors(points)
    cam = points @ R.T + t
    z = cam[..., 2:3]
    safe_z = torch.where(z.abs() > 1e-12, z, torch.full_like(z, 1e-12))
    hom = cam @ K.T
    pixels = hom[..., :2] / safe_z
    in_view = (z[..., 0] > 0) & in_image(pixels, camera)
    return pixels, in_view


def unproject_pixels(pixels: torch.Tensor, depth: torch.Tensor, camera: Camera) -> torch.Tensor:
    """픽셀 + 카메라 z 깊이 -> world 점"""
    depth = torch.as_tensor(depth, dtype=pixels.dtype, device=pixels.device)
    if bool((depth <= 0).any()):
        raise ValueError("depth는 0보다 커야 합니다.")
    _, K_inv, R, t = camera.tensors(pixels)
    hom = torch.cat([pixels, torch.ones_like(pixels[..., :1])], dim=-1)
    cam = (hom @ K_inv.T) * depth[..., None]
    return (cam - t) @ R


def reproject_pixels(pixels: torch.Tensor, depth: torch.Tensor,
                     cam_ref: Camera, cam_src: Camera) -> Tuple[torch.Tensor, torch.Tensor]:
    """reference 픽셀(+z 깊이)을 source 시점으로 옮김 = project(unproject(...))"""
    points = unproject_pixels(pixels, depth, cam_ref)
    return project_points(points, cam_src)


def distance_to_z(distance: torch.Tensor, directions: torch.Tensor, camera: Camera) -> torch.Tensor:
    """광선 거리 -> 카메라 z 깊이"""
    _, _, R, _ = camera.tensors(directions)
    return distance * (directions @ R[2])


def z_to_distance(z: torch.Tensor, pixels: torch.Tensor, camera: Camera) -> torch.Tensor:
    """픽셀의 카메라 z 깊이 -> 광선 거리"""
    _, K_inv, _, _ = camera.tensors(pixels)
    hom = torch.cat([pixels, torch.ones_like(pixels[..., :1])], dim=-1)
    return z * torch.linalg.norm(hom @ K_inv.T, dim=-1)


# ---------- 단일 점 버전 (OutOfView 센티넬 반환) ----------
def _vec(x, n: int) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(n))


def project(point, camera: Camera) -> Union[np.ndarray, OutOfView]:
    pixels, ok = project_points(_vec(point, 3), camera)
    return pixels.numpy() if bool(ok) else OUT_OF_VIEW


def unproject(pixel, depth: float, camera: Camera) -> np.ndarray:
    if not depth > 0:
        raise ValueError(f"depth는 0보다 커야 합니다: {depth}")
    return unproject_pixels(_vec(pixel, 2), torch.tensor(float(depth), dtype=torch.float64), camera).numpy()


def reproject(pixel, depth: float, cam_ref: Camera, cam_src: Camera) -> Union[np.ndarray, OutOfView]:
    return project(unproject(pixel, depth, cam_ref), cam_src)


# =========================================================
# 3) 광선
# =========================================================
@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass
class RayBatch:
    """광선 묶음. origins/directions [R,3], near/far [R], pixels [R,2]"""
    origins: torch.Tensor
    directions: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    pixels: torch.Tensor

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i].detach().cpu().numpy(), self.directions[i].detach().cpu().numpy(),
                   float(self.near[i]), float(self.far[i]))

    def __iter__(self) -> Iterator[Ray]:
        return (self[i] for i in range(len(self)))

    def points_at(self, distances: torch.Tensor) -> torch.Tensor:
        """[R,N] 거리 -> [R,N,3] 점"""
        return self.origins[:, None, :] + self.directions[:, None, :] * distances[..., None]


def pixel_directions(pixels: torch.Tensor, camera: Camera) -> torch.Tensor:
    """픽셀의 world 단위 광선 방향"""
    _, K_inv, R, _ = camera.tensors(pixels)
    hom = torch.cat([pixels, torch.ones_like(pixels[..., :1])], dim=-1)
    dirs = (hom @ K_inv.T) @ R
    return dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)


def generate_rays(camera: Camera, pixels, near, far) -> RayBatch:
    """
    픽셀마다 카메라 중심에서 출발하는 단위 광선 생성

    Args:
        pixels: [R,2] (텐서 또는 배열), 화면 안이어야 함
        near, far: 스칼라 또는 [R]
    """
    pixels = torch.as_tensor(pixels)
    if not pixels.is_floating_point():
        pixels = pixels.to(torch.get_default_dtype())
    pixels = pixels.reshape(-1, 2)
    if pixels.shape[0] == 0:
        raise ValueError("픽셀 목록이 비어 있습니다.")
    if not bool(in_image(pixels, camera).all()):
        raise ValueError("이미지 범위 밖의 픽셀이 있습니다.")

    n = pixels.shape[0]
    near = torch.as_tensor(near, dtype=pixels.dtype).expand(n).clone()
    far = torch.as_tensor(far, dtype=pixels.dtype).expand(n).clone()
    if bool((near <= 0).any()) or bool((far <= near).any()):
        raise ValueError("0 < near < far 이어야 합니다.")

    origin = torch.as_tensor(camera.center, dtype=pixels.dtype)
    origins = origin.expand(n, 3).clone()
    return RayBatch(origins, pixel_directions(pixels, camera), near, far, pixels)


def near_far_from_sphere(origins: torch.Tensor, directions: torch.Tensor,
                         radius: float = 1.0) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    장면 경계 구와의 교차 구간

    Returns:
        (near, far, hit). 빗나간 광선은 hit=False, near/far는 임의의 유효값
    """
    b = (origins * directions).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = torch.sqrt(torch.clamp(disc, min=0.0))
    near = torch.clamp(-b - root, min=1e-4)
    far = -b + root
    hit = hit & (far > near + 1e-6)
    near = torch.where(hit, near, torch.ones_like(near))
    far = torch.where(hit, far, torch.full_like(far, 2.0))
    return near, far, hit


# =========================================================
# 4) 평면 유도 호모그래피
# =========================================================
def relative_pose(cam_ref: Camera, cam_src: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """X_src = R_rel X_ref + t_rel"""
    R_rel = cam_src.R @ cam_ref.R.T
    t_rel = cam_src.t - R_rel @ cam_ref.t
    return R_rel, t_rel


def plane_homography(cam_ref: Camera, cam_src: Camera,
                     normals_ref: torch.Tensor, points_ref: torch.Tensor) -> torch.Tensor:
    """
    H = K_s (R_rel - t_rel n^T / d) K_r^-1,  평면 n^T X + d = 0 (ref 카메라 좌표계)

    Args:
        normals_ref: [R,3] ref 카메라 좌표계 단위 법선
        points_ref:  [R,3] ref 카메라 좌표계 표면점
    Returns:
        [R,3,3]
    """
    K_s, _, _, _ = cam_src.tensors(points_ref)
    _, K_r_inv, _, _ = cam_ref.tensors(points_ref)
    R_rel, t_rel = relative_pose(cam_ref, cam_src)
    R_rel = torch.as_tensor(R_rel, dtype=points_ref.dtype, device=points_ref.device)
    t_rel = torch.as_tensor(t_rel, dtype=points_ref.dtype, device=points_ref.device)

    d = -(normals_ref * points_ref).sum(-1)
    d = torch.where(d.abs() > 1e-10, d, torch.full_like(d, 1e-10))
    outer = t_rel[None, :, None] * normals_ref[:, None, :]
    return K_s @ (R_rel[None] - outer / d[:, None, None]) @ K_r_inv


def apply_homography(H: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """H [R,3,3], pixels [R,P,2] -> [R,P,2]"""
    hom = torch.cat([pixels, torch.ones_like(pixels[..., :1])], dim=-1)
    out = hom @ H.transpose(-1, -2)
    w = out[..., 2:3]
    w = torch.where(w.abs() > 1e-12, w, torch.full_like(w, 1e-12))
    return out[..., :2] / w
