"""
어블레이션 실행기
변형별(손실 항 on/off, 특징/깊이 모드) x 시드별로 학습 -> 메쉬 추출 -> CD 평가
결과는 실행 기록 DB에 저장하고, full 구성이 각 단일 제거 구성보다 CD가 같거나 낮은지 확인
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from src import constants as C
from src.database import init_database, record_run
from src.pipeline.evaluation import chamfer_distance
from src.pipeline.mesh import extract_mesh
from src.pipeline.scene import SceneData, load_scene
from src.pipeline.trainer import TrainConfig, train
from src.utils import NonFiniteGradientError, NonFiniteLossError, ensure_dir, fsum_mean

logger = logging.getLogger(__name__)

# 변형 이름 -> TrainConfig 덮어쓰기
VARIANTS: Dict[str, Dict] = {
    "full": {},
    "no_feat": {"use_feat": False},
    "no_depth": {"use_depth": False},
    "mono_depth": {"depth_mode": "mono"},
    "on_surface_feat": {"feat_mode": "on_surface"},
    # --all-variants
    "baseline": {"use_feat": False, "use_depth": False, "use_patch": False},
    "color_only": {"use_feat": False, "use_depth": False},
    "l1_feat": {"feat_mode": "l1"},
    "l2_feat": {"feat_mode": "l2"},
}
CORE_VARIANTS = ("full", "no_feat", "no_depth", "mono_depth", "on_surface_feat")
SINGLE_REMOVALS = ("no_feat", "no_depth", "mono_depth", "on_surface_feat")


@dataclass
class AblationRow:
    variant: str
    seed: int
    cd: float
    accuracy: float
    completeness: float
    final_total: float
    empty_mesh: bool = False
    out_dir: str = ""
    error: str = ""

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


@dataclass
class DirectionalCheck:
    """시드별로 full보다 CD가 낮았던 단일 제거 변형"""
    violations: Dict[int, List[str]] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)

    @property
    def status(self) -> str:
        failed = [s for s in self.seeds if self.violations.get(s)]
        if not failed:
            return "pass"
        return "hard_fail" if len(failed) == len(self.seeds) else "soft_fail"

    def format_lines(self) -> List[str]:
        lines = [f"directional_check={self.status}"]
        for s in self.seeds:
            bad = self.violations.get(s) or []
            lines.append(f"  seed={s} " + ("ok" if not bad else "violated_by=" + ",".join(bad)))
        return lines


@dataclass
class AblationResult:
    rows: List[AblationRow]
    check: DirectionalCheck

    def cd_table(self) -> Dict[str, Dict[int, float]]:
        table: Dict[str, Dict[int, float]] = {}
        for r in self.rows:
            table.setdefault(r.variant, {})[r.seed] = r.cd
        return table

    def format_table(self) -> str:
        seeds = sorted({r.seed for r in self.rows})
        header = "variant".ljust(18) + "".join(f"seed{s}".rjust(12) for s in seeds) + "mean".rjust(12)
        lines = [header]
        for variant, by_seed in self.cd_table().items():
            vals = [by_seed.get(s, math.nan) for s in seeds]
            finite = [v for v in vals if math.isfinite(v)]
            mean = fsum_mean(finite) if len(finite) == len(vals) else math.inf
            lines.append(variant.ljust(18) + "".join(f"{v:12.6f}" for v in vals) + f"{mean:12.6f}")
        return "\n".join(lines)


def directional_check(rows: Sequence[AblationRow], seeds: Sequence[int]) -> DirectionalCheck:
    by_key = {(r.variant, r.seed): r.cd for r in rows}
    check = DirectionalCheck(seeds=[s for s in seeds if ("full", s) in by_key])
    for s in check.seeds:
        full_cd = by_key[("full", s)]
        bad = [v for v in SINGLE_REMOVALS if (v, s) in by_key and not full_cd <= by_key[(v, s)]]
        if bad:
            check.violations[s] = bad
    return check


def run_variant(scene: SceneData, base: TrainConfig, variant: str, seed: int, out_dir: Path,
                reference_points: np.ndarray, grid: int = C.MESH_RESOLUTION,
                n_samples: int = C.CHAMFER_SAMPLES) -> AblationRow:
    if variant not in VARIANTS:
        raise ValueError(f"알 수 없는 변형: {variant} (가능: {sorted(VARIANTS)})")
    cfg = base.updated(seed=seed, **VARIANTS[variant])
    run_dir = ensure_dir(out_dir)
    try:
        result = train(scene, cfg, out_dir=run_dir, progress=False)
    except (NonFiniteLossError, NonFiniteGradientError) as e:
        logger.error(f"[{variant} seed={seed}] 학습 실패: {e}")
        return AblationRow(variant, seed, math.inf, math.inf, math.inf, math.nan, out_dir=str(run_dir),
                           error=str(e))

    mesh = extract_mesh(result.field, grid)
    mesh.save_obj(run_dir / "mesh.obj")
    cd = chamfer_distance(mesh, reference_points, n_samples, seed)
    final_total = result.last_report.total if result.last_report is not None else math.nan
    logger.info(f"[{variant} seed={seed}] {cd.format_line()} grid={grid}")
    return AblationRow(variant, seed, cd.cd, cd.accuracy, cd.completeness, final_total, cd.empty, str(run_dir))


def run_ablation(scene_dir: Path, base: TrainConfig, variants: Sequence[str], seeds: Sequence[int],
                 out_root: Path, reference_points: np.ndarray, grid: int = C.MESH_RESOLUTION,
                 n_samples: int = C.CHAMFER_SAMPLES, db_path: Optional[Path] = None) -> AblationResult:
    """변형 x 시드 전체 실행. 각 실행은 out_root/<variant>/seed<k>/ 에 저장"""
    scene = load_scene(Path(scene_dir), feature_scale=base.feature_scale)
    out_root = ensure_dir(Path(out_root))
    db_path = init_database(db_path or out_root / C.REGISTRY_FILE)

    rows: List[AblationRow] = []
    for variant in variants:
        for seed in seeds:
            row = run_variant(scene, base, variant, seed, out_root / variant / f"seed{seed}",
                              reference_points, grid, n_samples)
            record_run(db_path, scene=Path(scene_dir).name, variant=variant, seed=seed, steps=base.total_steps,
                       cd=row.cd, accuracy=row.accuracy, completeness=row.completeness,
                       final_total=row.final_total, empty_mesh=row.empty_mesh, out_dir=row.out_dir,
                       config=base.updated(seed=seed, **VARIANTS[variant]).to_dict())
            rows.append(row)

    check = directional_check(rows, seeds)
    for line in check.format_lines():
        (logger.warning if check.status != "pass" else logger.info)(line)
    return AblationResult(rows, check)
