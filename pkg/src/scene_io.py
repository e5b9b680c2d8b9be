"""
장면 디렉터리 / 파일 포맷 입출력
- cameras.json : 시점별 K, R, t, 크기, 이미지/사전깊이/특징맵 경로
- PF2          : "PF2 W H" 헤더 + little-endian float32 (무효 픽셀 NaN)
- FMAP         : "FMAP C W H scale" 헤더 + 채널 우선 float32
- keypoints    : "x y z v1 v2 ..." 텍스트
- 체크포인트   : 매직 + 버전 + JSON 메타 + 이름 붙은 float32 텐서
- 메쉬         : ASCII OBJ (trimesh)
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import trimesh

from src import constants as C
from src.geometry import Camera
from src.utils import AppError, SceneFormatError, load_json_safe, read_bytes_safe, save_json_safe, write_bytes_safe

logger = logging.getLogger(__name__)


# =========================================================
# 1) 바이트 리더 (잘린 파일은 오프셋과 함께 보고)
# =========================================================
class _ByteReader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise SceneFormatError(
                self.path, f"{what} 읽는 중 파일이 끝났습니다 (필요 {n} bytes, 남은 {len(self.data) - self.pos} bytes)",
                offset=len(self.data),
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def header_line(self, what: str) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise SceneFormatError(self.path, f"{what} 헤더 줄바꿈이 없습니다", offset=len(self.data))
        line = self.data[self.pos:end]
        self.pos = end + 1
        try:
            return line.decode("ascii").strip()
        except UnicodeDecodeError as e:
            raise SceneFormatError(self.path, f"{what} 헤더가 ASCII가 아닙니다", offset=e.start) from e

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _floats(reader: _ByteReader, count: int, what: str) -> np.ndarray:
    raw = reader.take(4 * count, what)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


# =========================================================
# 2) PF2 깊이/신뢰도 맵
# =========================================================
def write_pf2(path: Path, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"PF2는 2차원 배열이어야 합니다: shape={arr.shape}")
    h, w = arr.shape
    header = f"{C.PF2_MAGIC} {w} {h}\n".encode("ascii")
    write_bytes_safe(path, header + arr.astype("<f4").tobytes())


def read_pf2(path: Path) -> np.ndarray:
    """[H,W] float32, 무효 픽셀 NaN"""
    reader = _ByteReader(read_bytes_safe(path), Path(path))
    parts = reader.header_line("PF2").split()
    if len(parts) != 3 or parts[0] != C.PF2_MAGIC:
        raise SceneFormatError(path, f"PF2 헤더 형식 오류: {parts}", offset=0)
    try:
        w, h = int(parts[1]), int(parts[2])
    except ValueError as e:
        raise SceneFormatError(path, f"PF2 크기 파싱 실패: {parts}", offset=0) from e
    if w <= 0 or h <= 0:
        raise SceneFormatError(path, f"PF2 크기 오류: {w}x{h}", offset=0)
    values = _floats(reader, w * h, "PF2 데이터")
    if reader.remaining():
        raise SceneFormatError(path, f"PF2 데이터 뒤에 {reader.remaining()} bytes가 남았습니다", offset=reader.pos)
    return values.reshape(h, w)


# =========================================================
# 3) FMAP 특징맵
# =========================================================
def write_fmap(path: Path, data: np.ndarray, scale: float) -> None:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"FMAP은 [C,H,W] 배열이어야 합니다: shape={arr.shape}")
    c, h, w = arr.shape
    header = f"{C.FMAP_MAGIC} {c} {w} {h} {float(scale)!r}\n".encode("ascii")
    write_bytes_safe(path, header + arr.astype("<f4").tobytes())


def read_fmap(path: Path) -> Tuple[np.ndarray, float]:
    """([C,H,W] float32, scale)"""
    data = read_bytes_safe(path)
    reader = _ByteReader(data, Path(path))
    parts = reader.header_line("FMAP").split()
    if len(parts) != 5 or parts[0] != C.FMAP_MAGIC:
        raise SceneFormatError(path, f"FMAP 헤더 형식 오류: {parts}", offset=0)
    try:
        c, w, h = int(parts[1]), int(parts[2]), int(parts[3])
        scale = float(parts[4])
    except ValueError as e:
        raise SceneFormatError(path, f"FMAP 헤더 파싱 실패: {parts}", offset=0) from e
    if c <= 0 or w <= 0 or h <= 0:
        raise SceneFormatError(path, f"FMAP 크기 오류: C={c} {w}x{h}", offset=0)
    if not any(abs(scale - s) < 1e-9 for s in C.ALLOWED_FEATURE_SCALES):
        raise SceneFormatError(path, f"허용되지 않는 scale: {scale}", offset=0)

    plane = 4 * w * h
    payload = reader.remaining()
    if payload != c * plane and payload % plane == 0:
        raise SceneFormatError(
            path, f"채널 수 불일치: 헤더 C={c}, 데이터는 {payload // plane} 채널 분량", offset=reader.pos
        )
    values = _floats(reader, c * w * h, "FMAP 데이터")
    if reader.remaining():
        raise SceneFormatError(path, f"FMAP 데이터 뒤에 {reader.remaining()} bytes가 남았습니다", offset=reader.pos)
    if not np.isfinite(values).all():
        bad = int(np.argmin(np.isfinite(values)))
        raise SceneFormatError(path, "FMAP에 유한하지 않은 값이 있습니다", offset=len(data) - payload + 4 * bad)
    return values.reshape(c, h, w), scale


# =========================================================
# 4) 텐서 아카이브 (체크포인트)
# =========================================================
def write_tensor_archive(path: Path, tensors: Dict[str, np.ndarray], meta: Dict) -> None:
    """
    레이아웃 (little-endian):
        magic(8) | version u32 | meta_len u32 | meta(JSON utf-8) | count u32 |
        [name_len u16 | name | ndim u8 | dims u32 * ndim | float32 * prod(dims)] * count
    """
    meta_bytes = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    chunks = [C.CKPT_MAGIC, struct.pack("<II", C.CKPT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float32))
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    write_bytes_safe(path, b"".join(chunks))


def read_tensor_archive(path: Path) -> Tuple[Dict[str, np.ndarray], Dict]:
    reader = _ByteReader(read_bytes_safe(path), Path(path))
    magic = reader.take(len(C.CKPT_MAGIC), "magic")
    if magic != C.CKPT_MAGIC:
        raise SceneFormatError(path, f"체크포인트 magic 불일치: {magic!r}", offset=0)
    version, meta_len = reader.unpack("<II", "헤더")
    if version != C.CKPT_VERSION:
        raise SceneFormatError(path, f"지원하지 않는 체크포인트 버전: {version}", offset=len(C.CKPT_MAGIC))
    meta_start = reader.pos
    try:
        meta = json.loads(reader.take(meta_len, "메타").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SceneFormatError(path, f"메타 JSON 파싱 실패: {e}", offset=meta_start) from e

    (count,) = reader.unpack("<I", "텐서 개수")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "이름 길이")
        name = reader.take(name_len, "이름").decode("utf-8")
        (ndim,) = reader.unpack("<B", "차원 수")
        shape = reader.unpack(f"<{ndim}I", "shape") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = _floats(reader, size, f"텐서 {name}").reshape(shape)
    if reader.remaining():
        raise SceneFormatError(path, f"아카이브 뒤에 {reader.remaining()} bytes가 남았습니다", offset=reader.pos)
    return tensors, meta


# =========================================================
# 5) cameras.json
# =========================================================
@dataclass
class ViewRecord:
    """cameras.json의 시점 하나. 경로는 장면 디렉터리 기준 상대경로"""
    name: str
    camera: Camera
    image: str
    depth_prior: Optional[str] = None
    feature_map: Optional[str] = None
    depth_gt: Optional[str] = None

    def to_dict(self) -> Dict:
        d = {"name": self.name, "image": self.image, **self.camera.to_dict()}
        for key in ("depth_prior", "feature_map", "depth_gt"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d


def write_cameras(path: Path, views: Sequence[ViewRecord]) -> None:
    save_json_safe(path, {"version": 1, "views": [v.to_dict() for v in views]})


def read_cameras(path: Path) -> List[ViewRecord]:
    doc = load_json_safe(path)
    views = doc.get("views") if isinstance(doc, dict) else None
    if not isinstance(views, list) or not views:
        raise SceneFormatError(path, "'views' 목록이 없거나 비어 있습니다")
    out: List[ViewRecord] = []
    for i, v in enumerate(views):
        missing = [k for k in ("K", "R", "t", "width", "height", "image") if k not in v]
        if missing:
            raise SceneFormatError(path, f"views[{i}]에 필수 키가 없습니다: {missing}")
        try:
            camera = Camera.from_dict(v)
        except ValueError as e:
            raise SceneFormatError(path, f"views[{i}] 카메라 값 오류: {e}") from e
        out.append(ViewRecord(
            name=str(v.get("name", f"view{i:02d}")),
            camera=camera,
            image=v["image"],
            depth_prior=v.get("depth_prior"),
            feature_map=v.get("feature_map"),
            depth_gt=v.get("depth_gt"),
        ))
    return out


# =========================================================
# 6) 희소 키포인트 / 기준 점군
# =========================================================
def write_keypoints(path: Path, points: np.ndarray, visibility: Sequence[Sequence[int]]) -> None:
    lines = ["# x y z visible_view_indices..."]
    for p, vis in zip(np.asarray(points, dtype=np.float64), visibility):
        lines.append(" ".join([f"{p[0]:.9f}", f"{p[1]:.9f}", f"{p[2]:.9f}"] + [str(int(v)) for v in vis]))
    write_bytes_safe(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_keypoints(path: Path) -> Tuple[np.ndarray, List[Tuple[int, ...]]]:
    """([P,3] world 점, 점별 가시 시점 인덱스)"""
    data = read_bytes_safe(path)
    points: List[List[float]] = []
    visibility: List[Tuple[int, ...]] = []
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        line = raw.decode("utf-8", errors="replace").strip()
        if line and not line.startswith("#"):
            parts = line.split()
            try:
                if len(parts) < 3:
                    raise ValueError("좌표 3개가 필요합니다")
                xyz = [float(x) for x in parts[:3]]
                vis = tuple(int(x) for x in parts[3:])
            except ValueError as e:
                raise SceneFormatError(path, f"{lineno}번째 줄 파싱 실패: {line!r} ({e})", offset=offset) from e
            if not np.isfinite(xyz).all() or any(v < 0 for v in vis):
                raise SceneFormatError(path, f"{lineno}번째 줄 값 오류: {line!r}", offset=offset)
            points.append(xyz)
            visibility.append(vis)
        offset += len(raw) + 1
    return np.asarray(points, dtype=np.float64).reshape(-1, 3), visibility


def write_reference_points(path: Path, points: np.ndarray) -> None:
    text = "\n".join(f"{x:.9f} {y:.9f} {z:.9f}" for x, y, z in np.asarray(points, dtype=np.float64))
    write_bytes_safe(path, (text + "\n").encode("utf-8"))


def read_reference_points(path: Path) -> np.ndarray:
    try:
        pts = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
    except OSError as e:
        raise AppError(f"기준 점군 읽기 실패: {path}\n{e}") from e
    except ValueError as e:
        raise SceneFormatError(path, f"기준 점군 파싱 실패: {e}") from e
    if pts.shape[0] == 0 or pts.shape[1] != 3:
        raise SceneFormatError(path, f"기준 점군은 'x y z' 줄이어야 합니다: shape={pts.shape}")
    return pts


# =========================================================
# 7) 이미지 / 메쉬
# =========================================================
def read_image(path: Path) -> np.ndarray:
    """[H,W,3] float32 RGB, [0,1]"""
    try:
        buf = np.fromfile(str(path), dtype=np.uint8)
    except OSError as e:
        raise AppError(f"이미지 읽기 실패: {path}\n{e}") from e
    img = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    if img is None:
        raise SceneFormatError(path, "이미지를 디코딩할 수 없습니다")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path: Path, image: np.ndarray) -> None:
    img = np.clip(np.nan_to_num(np.asarray(image, dtype=np.float64)), 0.0, 1.0)
    img8 = np.round(img * 255.0).astype(np.uint8)
    if img8.ndim == 3:
        img8 = cv2.cvtColor(img8, cv2.COLOR_RGB2BGR)
    ok, encoded = cv2.imencode(".png", img8)
    if not ok:
        raise AppError(f"PNG 인코딩 실패: {path}")
    write_bytes_safe(path, encoded.tobytes())


def write_obj(path: Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        write_bytes_safe(path, b"# empty mesh\n")
        return
    mesh = trimesh.Trimesh(vertices=vertices, faces=faces, process=False)
    text = trimesh.exchange.obj.export_obj(mesh, include_normals=False, include_color=False,
                                           include_texture=False)
    write_bytes_safe(path, text.encode("utf-8"))


def read_obj(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    if not Path(path).exists():
        raise AppError(f"메쉬 파일이 없습니다: {path}")
    try:
        mesh = trimesh.load(str(path), file_type="obj", process=False, force="mesh")
    except Exception as e:
        raise SceneFormatError(path, f"OBJ 로드 실패: {e}") from e
    return np.asarray(mesh.vertices, dtype=np.float64), np.asarray(mesh.faces, dtype=np.int64)
