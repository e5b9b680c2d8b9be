"""
어블레이션 결과 엑셀 내보내기
- 헤더 굵게, 자동 필터
- CD가 가장 낮은 행을 노란색으로 강조
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Dict, List, Sequence

from openpyxl import Workbook
from openpyxl.styles import Font, PatternFill
from openpyxl.utils import get_column_letter

from src.utils import AppError

FILL_HIGHLIGHT = PatternFill(start_color="FFFF00", end_color="FFFF00", fill_type="solid")

ABLATION_COLUMNS = ["variant", "seed", "cd", "accuracy", "completeness", "final_total", "empty_mesh"]


def best_row_index(rows: Sequence[Dict[str, Any]], key: str = "cd") -> int:
    """key 값이 가장 작은 행 (유한값만). 없으면 -1"""
    best, best_val = -1, math.inf
    for i, row in enumerate(rows):
        v = row.get(key)
        if v is not None and math.isfinite(float(v)) and float(v) < best_val:
            best, best_val = i, float(v)
    return best


def export_ablation_table(path: Path, rows: List[Dict[str, Any]], columns: Sequence[str] = ABLATION_COLUMNS,
                          sheet_title: str = "ablation") -> Path:
    wb = Workbook()
    ws = wb.active
    ws.title = sheet_title

    for col, name in enumerate(columns, start=1):
        cell = ws.cell(row=1, column=col, value=name)
        cell.font = Font(bold=True)

    for r, row in enumerate(rows, start=2):
        for col, name in enumerate(columns, start=1):
            value = row.get(name)
            if isinstance(value, float) and not math.isfinite(value):
                value = str(value)
            ws.cell(row=r, column=col, value=value)

    best = best_row_index(rows)
    if best >= 0:
        for col in range(1, len(columns) + 1):
            ws.cell(row=best + 2, column=col).fill = FILL_HIGHLIGHT

    for col, name in enumerate(columns, start=1):
        ws.column_dimensions[get_column_letter(col)].width = max(12, len(name) + 2)
    if rows:
        ws.auto_filter.ref = f"A1:{get_column_letter(len(columns))}{len(rows) + 1}"

    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        wb.save(str(path))
    except OSError as e:
        raise AppError(f"엑셀 저장 실패: {path}\n{e}") from e
    return Path(path)
