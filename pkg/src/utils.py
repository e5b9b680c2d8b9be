"""
공통 유틸리티 함수들
- 예외 계층 (AppError 기반)
- 로깅 설정
- 안전한 파일 입출력 래퍼
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Optional


class AppError(Exception):
    """사용자에게 메시지로 보여줄 목적의 예외 (CLI 종료 코드 1)"""
    pass


class SceneFormatError(AppError):
    """파일 포맷 오류. 잘린 파일이면 바이트 오프셋을 함께 기록"""

    def __init__(self, path, message: str, offset: Optional[int] = None):
        self.path = Path(path) if path is not None else None
        self.offset = offset
        where = f" (offset {offset})" if offset is not None else ""
        super().__init__(f"포맷 오류: {path}{where}\n{message}")


class NonFiniteLossError(AppError):
    """손실 항이 NaN/Inf가 된 경우. component에 항 이름"""

    def __init__(self, component: str, value: float):
        self.component = component
        self.value = value
        super().__init__(f"손실 항 '{component}' 값이 유한하지 않습니다: {value}")


class NonFiniteGradientError(AppError):
    """그래디언트에 NaN/Inf가 섞인 경우. term에 원인 손실 항 이름"""

    def __init__(self, term: str):
        self.term = term
        super().__init__(f"'{term}' 항에서 유한하지 않은 그래디언트가 발생했습니다")


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    """콘솔 핸들러(+선택적 파일 핸들러) 설정"""
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


def fsum_mean(values: Iterable[float]) -> float:
    """보상 합(math.fsum) 기반 평균. 순서와 무관하게 같은 값"""
    vals = [float(v) for v in values]
    if not vals:
        return 0.0
    return math.fsum(vals) / len(vals)


def ensure_dir(path: Path) -> Path:
    try:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        return path
    except OSError as e:
        raise AppError(f"폴더 생성 실패: {path}\n{e}") from e


def read_bytes_safe(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise AppError(f"파일 읽기 실패: {path}\n{e}") from e


def write_bytes_safe(path: Path, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as e:
        raise AppError(f"파일 저장 실패: {path}\n{e}") from e


def load_json_safe(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise AppError(f"JSON 로드 실패: {path}\n{e}") from e
    except json.JSONDecodeError as e:
        raise SceneFormatError(path, f"JSON 파싱 실패: {e}", offset=e.pos) from e


def save_json_safe(path: Path, obj: Any) -> None:
    text = json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True)
    write_bytes_safe(path, (text + "\n").encode("utf-8"))
