"""
학습된 SDF에서 메쉬 추출 (마칭 큐브, 0 등위면)
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Tuple, Union

import mcubes
import numpy as np
import torch
import trimesh

from src import constants as C
from src.scene_io import write_obj

logger = logging.getLogger(__name__)

Bounds = Union[float, Tuple[float, float], Tuple[np.ndarray, np.ndarray]]


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # [V,3]
    faces: np.ndarray     # [F,3]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("면 인덱스가 정점 범위를 벗어났습니다.")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def edge_face_counts(self) -> Counter:
        """무방향 간선 -> 인접 면 수"""
        edges = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return Counter(map(tuple, edges.tolist()))

    def is_edge_manifold(self) -> bool:
        return all(c == 2 for c in self.edge_face_counts().values())

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces[:, ::-1].copy())

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    def save_obj(self, path: Path) -> None:
        write_obj(path, self.vertices, self.faces)


def _bounds(bounds: Bounds) -> Tuple[np.ndarray, np.ndarray]:
    if np.isscalar(bounds):
        r = float(bounds)
        return np.full(3, -r), np.full(3, r)
    lo, hi = bounds
    return np.broadcast_to(np.asarray(lo, dtype=np.float64), (3,)).copy(), \
        np.broadcast_to(np.asarray(hi, dtype=np.float64), (3,)).copy()


def _sdf_callable(field) -> Callable[[torch.Tensor], torch.Tensor]:
    if hasattr(field, "sdf"):
        return field.sdf
    if callable(field):
        return field
    raise TypeError(f"SDF를 평가할 수 없는 객체입니다: {type(field)}")


@torch.no_grad()
def evaluate_grid(field, resolution: int, bounds: Bounds = C.SCENE_BOUND_RADIUS, chunk: int = 64) -> np.ndarray:
    """[res,res,res] SDF 격자 (x, y, z 축 순서), slab 단위로 평가"""
    lo, hi = _bounds(bounds)
    sdf_fn = _sdf_callable(field)
    params = list(field.parameters()) if isinstance(field, torch.nn.Module) else []
    dtype = params[0].dtype if params else torch.float64
    axes = [torch.linspace(float(lo[i]), float(hi[i]), resolution, dtype=dtype) for i in range(3)]
    out = np.zeros((resolution, resolution, resolution), dtype=np.float64)
    for x0 in range(0, resolution, chunk):
        xs = axes[0][x0:x0 + chunk]
        gx, gy, gz = torch.meshgrid(xs, axes[1], axes[2], indexing="ij")
        pts = torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)
        out[x0:x0 + len(xs)] = sdf_fn(pts).reshape(len(xs), resolution, resolution).double().cpu().numpy()
    return out


def extract_mesh(field, grid_resolution: int = C.MESH_RESOLUTION, bounds: Bounds = C.SCENE_BOUND_RADIUS,
                 chunk: int = 64) -> TriangleMesh:
    """
    마칭 큐브로 0 등위면 추출 (간선 선형 보간). 전부 양수/음수인 필드는 빈 메쉬
    면적 1e-12 이하의 퇴화 면은 제거
    """
    if grid_resolution < 8:
        raise ValueError(f"grid_resolution은 8 이상이어야 합니다: {grid_resolution}")
    lo, hi = _bounds(bounds)
    sdf = evaluate_grid(field, grid_resolution, (lo, hi), chunk)
    if not np.isfinite(sdf).all():
        raise ValueError("SDF 격자에 유한하지 않은 값이 있습니다.")
    if (sdf > 0).all() or (sdf < 0).all():
        logger.warning("SDF가 격자 전체에서 같은 부호입니다. 빈 메쉬를 반환합니다.")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    vertices, faces = mcubes.marching_cubes(-sdf, 0.0)
    vertices = vertices * ((hi - lo) / (grid_resolution - 1))[None, :] + lo[None, :]
    mesh = TriangleMesh(vertices, faces)

    keep = (mesh.face_areas() > 1e-12) & (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) \
        & (faces[:, 0] != faces[:, 2])
    if not keep.all():
        logger.debug(f"퇴화 면 {int((~keep).sum())}개 제거")
    faces = mesh.faces[keep]
    used = np.unique(faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[faces])
