"""
SQLite 실행 기록 관리 모듈
어블레이션/학습 실행 결과(CD, 손실, 설정) 저장 및 조회
"""
import json
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from src import constants as C
from src.utils import AppError

# 기본 데이터베이스 파일 경로
DB_PATH = Path("runs") / C.REGISTRY_FILE


def _connect(db_path: Optional[Path]) -> sqlite3.Connection:
    path = Path(db_path or DB_PATH)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        conn = sqlite3.connect(str(path))
    except (OSError, sqlite3.Error) as e:
        raise AppError(f"실행 기록 DB 연결 실패: {path}\n{e}") from e
    conn.row_factory = sqlite3.Row
    return conn


def init_database(db_path: Optional[Path] = None) -> Path:
    """runs 테이블이 없으면 생성"""
    conn = _connect(db_path)
    try:
        conn.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                created_at TEXT NOT NULL,
                scene TEXT NOT NULL,
                variant TEXT NOT NULL,
                seed INTEGER NOT NULL,
                steps INTEGER NOT NULL,
                cd REAL,
                accuracy REAL,
                completeness REAL,
                final_total REAL,
                empty_mesh INTEGER DEFAULT 0,
                out_dir TEXT,
                config_json TEXT
            )
        """)
        conn.commit()
    finally:
        conn.close()
    return Path(db_path or DB_PATH)


def record_run(db_path: Optional[Path], scene: str, variant: str, seed: int, steps: int,
               cd: float, accuracy: float, completeness: float, final_total: float,
               empty_mesh: bool = False, out_dir: str = "", config: Optional[Dict[str, Any]] = None) -> int:
    """
    실행 결과 한 건 저장

    Returns:
        새 행의 id
    """
    conn = _connect(db_path)
    try:
        cursor = conn.cursor()
        cursor.execute("""
            INSERT INTO runs (created_at, scene, variant, seed, steps, cd, accuracy, completeness,
                              final_total, empty_mesh, out_dir, config_json)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        """, (
            datetime.now().isoformat(timespec="seconds"), scene, variant, int(seed), int(steps),
            float(cd), float(accuracy), float(completeness), float(final_total),
            1 if empty_mesh else 0, str(out_dir), json.dumps(config or {}, sort_keys=True),
        ))
        conn.commit()
        return int(cursor.lastrowid)
    except sqlite3.Error as e:
        raise AppError(f"실행 기록 저장 실패: {e}") from e
    finally:
        conn.close()


def get_runs(db_path: Optional[Path] = None, scene: Optional[str] = None,
             variant: Optional[str] = None) -> List[Dict[str, Any]]:
    """실행 기록 조회 (scene/variant 필터, id 순)"""
    conn = _connect(db_path)
    try:
        query = "SELECT * FROM runs WHERE 1=1"
        params: List[Any] = []
        if scene is not None:
            query += " AND scene = ?"
            params.append(scene)
        if variant is not None:
            query += " AND variant = ?"
            params.append(variant)
        rows = conn.execute(query + " ORDER BY id", params).fetchall()
    except sqlite3.Error as e:
        raise AppError(f"실행 기록 조회 실패: {e}") from e
    finally:
        conn.close()

    result = []
    for row in rows:
        data = dict(row)
        data["empty_mesh"] = bool(data["empty_mesh"])
        data["config"] = json.loads(data.pop("config_json") or "{}")
        result.append(data)
    return result
