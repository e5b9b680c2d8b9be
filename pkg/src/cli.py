"""
명령행 진입점
    synth       합성 장면 생성 (이미지/카메라/GT 깊이/깊이 사전/키포인트)
    train       SDF 필드 학습 -> checkpoint.bin, metrics.log, manifest.json, summary.json
    mesh-eval   메쉬 추출 + Chamfer 거리
    render-maps 깊이/신뢰도/특징 유사도 맵
    ablation    변형 x 시드 실행, CD 표 + 엑셀 내보내기

설정 우선순위: 명령행 플래그 > --config JSON > 기본값
종료 코드: 0 성공, 1 실행 오류, 2 사용법 오류
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch

from src import __version__
from src import constants as C
from src.field import load_checkpoint
from src.losses import FEATURE_METRIC
from src.pipeline.ablation import CORE_VARIANTS, VARIANTS, run_ablation
from src.pipeline.evaluation import chamfer_distance, load_reference_points
from src.pipeline.maps import render_maps
from src.pipeline.mesh import extract_mesh
from src.pipeline.scene import load_scene
from src.pipeline.trainer import TrainConfig, train
from src.report import export_ablation_table
from src.synth import get_preset, make_camera_rig, write_scene
from src.utils import AppError, ensure_dir, load_json_safe, save_json_safe, setup_logging

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """잘못된 인자 (종료 코드 2)"""


@dataclass
class RunManifest:
    """학습 시작 전에 한 번 기록하고 이후 수정하지 않음"""
    command: str
    config: Dict[str, Any]
    seed: int
    inputs: Dict[str, str]
    outputs: Dict[str, str]
    version: str = __version__
    timings: Dict[str, str] = field(default_factory=dict)

    def save(self, path: Path) -> None:
        save_json_safe(path, asdict(self))


# =========================================================
# 설정 병합
# =========================================================
def _config_section(path: Optional[str], command: str) -> Dict[str, Any]:
    """--config JSON. 명령 이름 키가 있으면 그 섹션만, 없으면 전체"""
    if not path:
        return {}
    if not Path(path).exists():
        raise UsageError(f"설정 파일이 없습니다: {path}")
    data = load_json_safe(Path(path))
    if not isinstance(data, dict):
        raise UsageError(f"설정 파일은 JSON 객체여야 합니다: {path}")
    section = data.get(command, data)
    return dict(section) if isinstance(section, dict) else {}


def _train_config(args: argparse.Namespace, base: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """base(체크포인트에 저장된 설정) < --config < 명령행 플래그"""
    section = {**(base or {}), **_config_section(args.config, "train")}
    flags = {
        "total_steps": args.steps, "rays_per_batch": args.rays, "alpha": args.alpha, "beta": args.beta,
        "tau": args.tau, "feat_mode": args.feat_mode, "depth_mode": args.depth_mode, "seed": args.seed,
        "ckpt_every": args.ckpt_every, "log_every": args.log_every, "maps_every": args.maps_every,
        "lr": args.lr, "use_feat": args.use_feat, "use_depth": args.use_depth, "use_color": args.use_color,
        "use_patch": args.use_patch,
    }
    try:
        return TrainConfig.from_dict(section).updated(**flags)
    except (TypeError, ValueError) as e:
        raise UsageError(f"학습 설정 오류: {e}") from e


def _resume_config(args: argparse.Namespace, saved: Dict[str, Any]) -> Tuple[TrainConfig, List[str]]:
    """재개 설정과 체크포인트 설정에서 달라진 키 목록"""
    cfg = _train_config(args, saved)
    now = json.loads(json.dumps(cfg.to_dict()))
    before = json.loads(json.dumps(saved))
    return cfg, sorted(k for k, v in now.items() if before.get(k) != v)


def _option(args: argparse.Namespace, section: Dict[str, Any], name: str, default: Any) -> Any:
    value = getattr(args, name, None)
    if value is not None:
        return value
    return section.get(name, default)


def _scene_from_manifest(checkpoint: Path) -> Optional[str]:
    manifest = checkpoint.parent / C.MANIFEST_FILE
    if not manifest.exists():
        return None
    return load_json_safe(manifest).get("inputs", {}).get("scene")


def _require_checkpoint(path: str) -> Path:
    ckpt = Path(path)
    if not ckpt.is_file():
        raise UsageError(f"체크포인트가 없습니다: {ckpt}")
    return ckpt


# =========================================================
# 명령
# =========================================================
def cmd_synth(args: argparse.Namespace) -> int:
    section = _config_section(args.config, "synth")
    try:
        preset = get_preset(args.preset or section.get("preset", "sphere3"))
    except ValueError as e:
        raise UsageError(str(e)) from e
    overrides = {
        "n_views": _option(args, section, "views", None),
        "angle_deg": _option(args, section, "angle", None),
        "image_size": _option(args, section, "size", None),
        "focal": _option(args, section, "focal", None),
        "radius": _option(args, section, "radius", None),
        "n_keypoints": _option(args, section, "keypoints", None),
    }
    preset = dataclasses.replace(preset, **{k: v for k, v in overrides.items() if v is not None})
    try:
        make_camera_rig(preset.n_views, preset.radius, preset.angle_deg, preset.image_size, preset.focal)
    except ValueError as e:
        raise UsageError(str(e)) from e

    seed = int(_option(args, section, "seed", 0))
    out = write_scene(preset, Path(args.out), seed=seed)
    print(f"scene={out} preset={preset.name} views={preset.n_views} angle={preset.angle_deg:g}")
    return C.EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    scene_dir = Path(args.scene)
    ckpt_path = Path(args.out) / C.CHECKPOINT_FILE

    resume = None
    if args.resume and ckpt_path.exists():
        resume = load_checkpoint(ckpt_path)
        logger.info(f"체크포인트에서 재개: step={resume.step}")
    saved = resume.meta.get("train_config") if resume is not None else None
    if saved is not None:
        cfg, drift = _resume_config(args, saved)
        if drift:
            logger.warning(f"체크포인트 설정과 다른 값으로 재개: {drift}")
    else:
        cfg = _train_config(args)
    out_dir = ensure_dir(Path(args.out))

    manifest = RunManifest(
        command="train", config=cfg.to_dict(), seed=cfg.seed,
        inputs={"scene": str(scene_dir)},
        outputs={"checkpoint": str(ckpt_path), "metrics": str(out_dir / C.METRICS_LOG_FILE),
                 "summary": str(out_dir / C.SUMMARY_FILE)},
        timings={"started_at": datetime.now().isoformat(timespec="seconds")},
    )
    if resume is None:
        manifest.save(out_dir / C.MANIFEST_FILE)

    result = train(scene_dir, cfg, out_dir=out_dir, resume=resume, progress=not args.no_progress)
    last = result.last_report
    summary = {
        "steps": cfg.total_steps,
        "final": last.to_dict() if last is not None else {},
        "warnings": dict(last.warnings) if last is not None else {},
    }
    save_json_safe(out_dir / C.SUMMARY_FILE, summary)
    logger.info(f"학습 완료: {result.elapsed:.1f}s")
    if last is not None:
        print(last.format_line())
    return C.EXIT_OK


def cmd_mesh_eval(args: argparse.Namespace) -> int:
    ckpt_path = _require_checkpoint(args.checkpoint)
    section = _config_section(args.config, "mesh-eval")
    grid = int(_option(args, section, "grid", C.MESH_RESOLUTION))
    samples = int(_option(args, section, "samples", C.CHAMFER_SAMPLES))
    seed = int(_option(args, section, "seed", 0))
    if grid < 8:
        raise UsageError(f"--grid는 8 이상이어야 합니다: {grid}")

    ckpt = load_checkpoint(ckpt_path)
    mesh = extract_mesh(ckpt.field, grid)
    mesh_path = Path(args.out_mesh) if args.out_mesh else ckpt_path.parent / f"mesh_grid{grid}.obj"
    mesh.save_obj(mesh_path)

    scene_dir = args.scene or _scene_from_manifest(ckpt_path)
    refs = load_reference_points(scene_dir, args.ref_points, samples, seed)
    result = chamfer_distance(mesh, refs, samples, seed)
    save_json_safe(mesh_path.with_suffix(".json"), {**result.to_dict(), "grid": grid, "mesh": str(mesh_path)})
    print(f"{result.format_line()} grid={grid}")
    return C.EXIT_OK


def cmd_render_maps(args: argparse.Namespace) -> int:
    ckpt_path = _require_checkpoint(args.checkpoint)
    scene_dir = args.scene or _scene_from_manifest(ckpt_path)
    if scene_dir is None:
        raise UsageError("--scene이 필요합니다 (체크포인트 옆에 manifest.json이 없음).")
    ckpt = load_checkpoint(ckpt_path)
    scene = load_scene(Path(scene_dir))
    if not 0 <= args.view < len(scene):
        raise UsageError(f"--view 범위 오류: {args.view} (시점 {len(scene)}개)")
    if args.stride < 1:
        raise UsageError(f"--stride는 1 이상이어야 합니다: {args.stride}")

    maps = render_maps(ckpt.field, scene, args.view, stride=args.stride, metric=args.metric)
    out_dir = ensure_dir(Path(args.out) if args.out else ckpt_path.parent / "maps")
    name = scene.views[args.view].name
    maps.save(out_dir, name)
    print(f"maps={out_dir} view={name} size={maps.depth.shape[1]}x{maps.depth.shape[0]}")
    return C.EXIT_OK


def cmd_ablation(args: argparse.Namespace) -> int:
    base = _train_config(args)
    out_root = ensure_dir(Path(args.out))
    if args.scene:
        scene_dir = Path(args.scene)
    else:
        scene_dir = write_scene(get_preset(args.preset), out_root / "scene", seed=0)

    if args.variants:
        unknown = [v for v in args.variants if v not in VARIANTS]
        if unknown:
            raise UsageError(f"알 수 없는 변형: {unknown} (가능: {sorted(VARIANTS)})")
        variants: Sequence[str] = args.variants
    else:
        variants = list(VARIANTS) if args.all_variants else list(CORE_VARIANTS)
    if "full" not in variants:
        logger.warning("full 변형이 없어 방향성 검사를 건너뜁니다.")

    samples = args.samples or C.CHAMFER_SAMPLES
    refs = load_reference_points(scene_dir, args.ref_points, samples, 0)
    result = run_ablation(scene_dir, base, variants, args.seeds, out_root, refs, grid=args.grid,
                          n_samples=samples, db_path=Path(args.db) if args.db else None)

    print(result.format_table())
    for line in result.check.format_lines():
        print(line)
    xlsx = export_ablation_table(Path(args.xlsx) if args.xlsx else out_root / "ablation.xlsx",
                                 [r.to_dict() for r in result.rows])
    print(f"xlsx={xlsx}")
    if args.strict and result.check.status == "hard_fail":
        return C.EXIT_RUNTIME
    return C.EXIT_OK


# =========================================================
# 파서
# =========================================================
def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON 설정 파일 (명령 이름 섹션 또는 평면 키)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="로그 레벨 (기본 INFO)")
    p.add_argument("--threads", type=int, help="torch 연산 스레드 수 상한")
    return p


def _train_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("학습 설정")
    g.add_argument("--steps", type=int, help=f"총 스텝 수 (기본 {C.TOTAL_STEPS})")
    g.add_argument("--rays", type=int, help=f"배치당 광선 수 (기본 {C.RAYS_PER_BATCH})")
    g.add_argument("--alpha", type=float, help=f"깊이 손실 가중치 (기본 {C.ALPHA_DEPTH})")
    g.add_argument("--beta", type=float, help=f"Eikonal 가중치 (기본 {C.BETA_EIKONAL})")
    g.add_argument("--tau", type=float, help=f"가림 마스크 임계값 (기본 {C.TAU_MASK})")
    g.add_argument("--feat-mode", choices=C.FEATURE_MODES, help="특징 일관성 손실 모드 (기본 accumulate)")
    g.add_argument("--depth-mode", choices=C.DEPTH_MODES, help="깊이 손실 모드 (기본 uncertainty)")
    g.add_argument("--seed", type=int, help="난수 시드 (기본 0)")
    g.add_argument("--ckpt-every", type=int, help=f"체크포인트 저장 간격 (기본 {C.CKPT_INTERVAL})")
    g.add_argument("--log-every", type=int, help=f"metrics.log 기록 간격 (기본 {C.LOG_INTERVAL})")
    g.add_argument("--maps-every", type=int, help="맵 스냅샷 간격 (0이면 끔)")
    g.add_argument("--lr", type=float, help=f"학습률 (기본 {C.LEARNING_RATE})")
    g.add_argument("--no-feat", dest="use_feat", action="store_const", const=False, help="특징 일관성 손실 끄기")
    g.add_argument("--no-depth", dest="use_depth", action="store_const", const=False, help="깊이 손실 끄기")
    g.add_argument("--no-color", dest="use_color", action="store_const", const=False, help="색상 손실 끄기")
    g.add_argument("--no-patch", dest="use_patch", action="store_const", const=False, help="패치 워핑 손실 끄기")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-sdf", description="희소 시점 SDF 표면 재구성")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common, train_flags = _common_parser(), _train_flags()

    p = sub.add_parser("synth", parents=[common], help="합성 장면 생성")
    p.add_argument("--preset", choices=C.SYNTH_PRESETS, help="장면 프리셋 (기본 sphere3)")
    p.add_argument("--out", required=True, help="출력 장면 디렉터리")
    p.add_argument("--views", type=int, help="시점 수 (기본 3)")
    p.add_argument("--angle", type=float, help="인접 시점 간 각도(도) (기본 45)")
    p.add_argument("--size", type=int, help="이미지 한 변 픽셀 수 (기본 96)")
    p.add_argument("--focal", type=float, help="초점 거리(픽셀) (기본 80)")
    p.add_argument("--radius", type=float, help="카메라 거리 (기본 2)")
    p.add_argument("--keypoints", type=int, help="희소 키포인트 수 (기본 64)")
    p.add_argument("--seed", type=int, help="난수 시드 (기본 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, train_flags], help="SDF 필드 학습")
    p.add_argument("--scene", required=True, help="장면 디렉터리")
    p.add_argument("--out", required=True, help="실행 출력 디렉터리")
    p.add_argument("--resume", action="store_true", help="출력 디렉터리의 checkpoint.bin에서 재개")
    p.add_argument("--no-progress", action="store_true", help="진행 표시줄 끄기")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mesh-eval", parents=[common], help="메쉬 추출 + Chamfer 거리")
    p.add_argument("--checkpoint", required=True, help="checkpoint.bin 경로")
    p.add_argument("--scene", help="scene.json이 있는 장면 디렉터리 (기본: manifest의 장면)")
    p.add_argument("--ref-points", help="기준 점군 파일 (x y z 한 줄씩)")
    p.add_argument("--grid", type=int, help=f"마칭 큐브 격자 해상도 (기본 {C.MESH_RESOLUTION})")
    p.add_argument("--samples", type=int, help=f"Chamfer 표면 샘플 수 (기본 {C.CHAMFER_SAMPLES})")
    p.add_argument("--seed", type=int, help="샘플링 시드 (기본 0)")
    p.add_argument("--out-mesh", help="OBJ 출력 경로 (기본: 체크포인트 옆 mesh_grid<N>.obj)")
    p.set_defaults(func=cmd_mesh_eval)

    p = sub.add_parser("render-maps", parents=[common], help="깊이/신뢰도/유사도 맵 렌더")
    p.add_argument("--checkpoint", required=True, help="checkpoint.bin 경로")
    p.add_argument("--scene", help="장면 디렉터리 (기본: manifest의 장면)")
    p.add_argument("--view", type=int, default=0, help="기준 시점 인덱스 (기본 0)")
    p.add_argument("--stride", type=int, default=1, help="픽셀 간격 (기본 1)")
    p.add_argument("--metric", choices=sorted(set(FEATURE_METRIC.values())), default="cos",
                   help="특징 유사도 (기본 cos)")
    p.add_argument("--out", help="출력 디렉터리 (기본: 체크포인트 옆 maps/)")
    p.set_defaults(func=cmd_render_maps)

    p = sub.add_parser("ablation", parents=[common, train_flags], help="어블레이션 표 생성")
    p.add_argument("--scene", help="장면 디렉터리 (없으면 --preset으로 합성)")
    p.add_argument("--preset", choices=C.SYNTH_PRESETS, default="spherebox3", help="합성 프리셋 (기본 spherebox3)")
    p.add_argument("--out", required=True, help="출력 루트 디렉터리")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="시드 목록 (기본 0 1 2)")
    p.add_argument("--variants", nargs="+", help=f"실행할 변형 (가능: {', '.join(VARIANTS)})")
    p.add_argument("--all-variants", action="store_true", help="baseline, color_only, l1_feat, l2_feat 포함")
    p.add_argument("--grid", type=int, default=C.MESH_RESOLUTION, help="마칭 큐브 격자 해상도")
    p.add_argument("--samples", type=int, help="Chamfer 표면 샘플 수")
    p.add_argument("--ref-points", help="기준 점군 파일")
    p.add_argument("--db", help="실행 기록 DB 경로 (기본: <out>/runs.sqlite)")
    p.add_argument("--xlsx", help="엑셀 출력 경로 (기본: <out>/ablation.xlsx)")
    p.add_argument("--strict", action="store_true", help="모든 시드에서 방향성 검사 실패 시 종료 코드 1")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level)
    if args.threads is not None:
        if args.threads < 1:
            parser.print_usage(sys.stderr)
            print(f"--threads는 1 이상이어야 합니다: {args.threads}", file=sys.stderr)
            return C.EXIT_USAGE
        torch.set_num_threads(args.threads)

    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"오류: {e}", file=sys.stderr)
        return C.EXIT_USAGE
    except (AppError, ValueError) as e:
        logger.error(str(e))
        return C.EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
