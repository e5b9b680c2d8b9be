"""
Chamfer 거리 평가
CD = 0.5 * (정확도: 메쉬 샘플 -> 기준점 평균 거리 + 완전도: 기준점 -> 메쉬 샘플 평균 거리)
최근접 탐색은 KD-tree (근사 없음)
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import trimesh
from scipy.spatial import cKDTree

from src import constants as C
from src.pipeline.mesh import TriangleMesh
from src.scene_io import read_reference_points
from src.synth import AnalyticScene, sample_surface_points
from src.utils import AppError, fsum_mean, load_json_safe

logger = logging.getLogger(__name__)


@dataclass
class ChamferResult:
    accuracy: float      # mesh -> ref
    completeness: float  # ref -> mesh
    cd: float
    n_samples: int
    empty: bool = False

    def to_dict(self) -> Dict:
        return asdict(self)

    def format_line(self) -> str:
        flag = " EMPTY_MESH" if self.empty else ""
        return (f"CD={self.cd:.6f} acc={self.accuracy:.6f} comp={self.completeness:.6f} "
                f"n={self.n_samples}{flag}")


def _mean_nn(src: np.ndarray, dst: np.ndarray) -> float:
    dist, _ = cKDTree(dst).query(src, k=1)
    return fsum_mean(dist)


def chamfer_points(points_a: np.ndarray, points_b: np.ndarray) -> ChamferResult:
    """두 점군 사이 대칭 Chamfer (a가 재구성, b가 기준)"""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("점군이 비어 있습니다.")
    acc = _mean_nn(a, b)
    comp = _mean_nn(b, a)
    return ChamferResult(acc, comp, 0.5 * (acc + comp), len(a))


def chamfer_distance(mesh: TriangleMesh, reference_points: np.ndarray, n_samples: int = C.CHAMFER_SAMPLES,
                     seed: int = 0) -> ChamferResult:
    """
    메쉬 표면에서 면적 가중 균일 샘플 n_samples개를 뽑아 기준 점군과 비교
    빈 메쉬는 CD=inf, empty=True
    """
    ref = np.asarray(reference_points, dtype=np.float64).reshape(-1, 3)
    if len(ref) == 0:
        raise ValueError("기준 점군이 비어 있습니다.")
    if mesh.is_empty:
        logger.warning("빈 메쉬입니다. CD=inf로 보고합니다.")
        return ChamferResult(math.inf, math.inf, math.inf, 0, empty=True)
    samples, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), n_samples, seed=seed)
    return chamfer_points(np.asarray(samples), ref)


def load_reference_points(scene_dir: Optional[Path] = None, ref_path: Optional[Path] = None,
                          n_points: int = C.CHAMFER_SAMPLES, seed: int = 0) -> np.ndarray:
    """
    기준 점군: ref_path(x y z 텍스트)가 있으면 그것을, 없으면 scene.json의 해석적 장면에서 표면 샘플
    """
    if ref_path is not None:
        return read_reference_points(Path(ref_path))
    if scene_dir is None:
        raise AppError("기준 점군 파일 또는 장면 디렉터리가 필요합니다.")
    scene_json = Path(scene_dir) / C.SCENE_FILE
    if not scene_json.exists():
        raise AppError(f"{scene_json}가 없어 기준 점군을 만들 수 없습니다. --ref-points를 지정하세요.")
    scene = AnalyticScene.from_dict(load_json_safe(scene_json)["scene"])
    return sample_surface_points(scene, n_points, np.random.default_rng(seed))
