"""
학습 / 메쉬 추출 / 평가 파이프라인
"""
from src.pipeline.evaluation import ChamferResult, chamfer_distance, chamfer_points
from src.pipeline.maps import MapSet, render_maps
from src.pipeline.mesh import TriangleMesh, extract_mesh
from src.pipeline.scene import SceneData, ViewData, load_scene
from src.pipeline.trainer import TrainConfig, TrainResult, train

__all__ = [
    "ChamferResult",
    "chamfer_distance",
    "chamfer_points",
    "MapSet",
    "render_maps",
    "TriangleMesh",
    "extract_mesh",
    "SceneData",
    "ViewData",
    "load_scene",
    "TrainConfig",
    "TrainResult",
    "train",
]
