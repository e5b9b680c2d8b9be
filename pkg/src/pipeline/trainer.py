"""
학습 루프
스텝마다: 기준 시점/광선 배치 샘플 -> 렌더 -> 손실 -> 역전파 -> Adam 갱신
- 스텝별 난수는 (seed, step)으로 결정 -> 체크포인트 재개 후에도 같은 배치
- 처음 2.5% 스텝은 가림 마스크를 1로 고정
- 패치 워핑 손실은 전체의 20% 스텝부터
"""
from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import torch
from tqdm import tqdm

from src import constants as C
from src.field import Checkpoint, FieldConfig, ImplicitField, OptimizerState, apply_gradients, save_checkpoint
from src.losses import (FEATURE_METRIC, LossComponents, LossReport, color_loss, depth_confidence_batch,
                        depth_loss, eikonal_loss, feature_consistency_loss, sample_similarities, total_loss)
from src.pipeline.maps import make_source_depth_fn, rays_for_pixels, render_maps
from src.pipeline.scene import SceneData, load_scene
from src.rendering import render_feature_similarity, render_rays, to_sections
from src.utils import ensure_dir

logger = logging.getLogger(__name__)


# =========================================================
# 1) 설정
# =========================================================
@dataclass
class TrainConfig:
    total_steps: int = C.TOTAL_STEPS
    rays_per_batch: int = C.RAYS_PER_BATCH
    alpha: float = C.ALPHA_DEPTH
    beta: float = C.BETA_EIKONAL
    tau: float = C.TAU_MASK
    patch_start_fraction: float = C.PATCH_START_FRACTION
    mask_warmup_fraction: float = C.MASK_WARMUP_FRACTION
    feat_mode: str = "accumulate"
    depth_mode: str = "uncertainty"
    seed: int = 0
    ckpt_every: int = C.CKPT_INTERVAL
    log_every: int = C.LOG_INTERVAL
    maps_every: int = 0
    lr: float = C.LEARNING_RATE
    warmup_fraction: float = C.WARMUP_FRACTION
    n_coarse: int = C.N_COARSE
    n_importance: int = C.N_IMPORTANCE
    feature_scale: float = 0.5
    # 손실 항 on/off (어블레이션)
    use_feat: bool = True
    use_depth: bool = True
    use_color: bool = True
    use_patch: bool = True
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def __post_init__(self):
        if isinstance(self.field, dict):
            self.field = FieldConfig.from_dict(self.field)
        self.validate()

    def validate(self) -> None:
        if self.total_steps <= 0 or self.rays_per_batch <= 0:
            raise ValueError("total_steps, rays_per_batch는 양수여야 합니다.")
        if not 0.0 <= self.patch_start_fraction < 1.0:
            raise ValueError(f"patch_start_fraction은 [0, 1) 범위여야 합니다: {self.patch_start_fraction}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha, beta는 0 이상이어야 합니다.")
        if self.feat_mode not in C.FEATURE_MODES:
            raise ValueError(f"알 수 없는 feat_mode: {self.feat_mode} (가능: {C.FEATURE_MODES})")
        if self.depth_mode not in C.DEPTH_MODES:
            raise ValueError(f"알 수 없는 depth_mode: {self.depth_mode} (가능: {C.DEPTH_MODES})")
        if self.n_coarse < 2:
            raise ValueError("n_coarse는 2 이상이어야 합니다.")

    @property
    def patch_start_step(self) -> int:
        return int(round(self.patch_start_fraction * self.total_steps))

    @property
    def mask_warmup_steps(self) -> int:
        return int(round(self.mask_warmup_fraction * self.total_steps))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"알 수 없는 설정 키: {sorted(unknown)}")
        return cls(**d)

    def updated(self, **overrides) -> "TrainConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


@dataclass
class TrainResult:
    field: ImplicitField
    state: OptimizerState
    reports: List[LossReport]
    last_report: Optional[LossReport] = None
    elapsed: float = 0.0


# =========================================================
# 2) 한 스텝
# =========================================================
def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def _train_step(field_: ImplicitField, scene: SceneData, cfg: TrainConfig, state: OptimizerState,
                valid_pixels: List[torch.Tensor], step: int) -> LossReport:
    gen = step_generator(cfg.seed, step)
    warnings: Counter = Counter()
    dtype = next(field_.parameters()).dtype

    # ---------- 광선 배치 ----------
    ref_idx = int(torch.randint(len(scene), (1,), generator=gen))
    ref = scene.views[ref_idx]
    pool = valid_pixels[ref_idx]
    pixels = pool[torch.randint(len(pool), (cfg.rays_per_batch,), generator=gen)]
    cam = ref.camera
    rays, _ = rays_for_pixels(cam, pixels)

    render = render_rays(field_, rays, cfg.n_coarse, cfg.n_importance, gen)
    sources = [i for i in range(len(scene)) if i != ref_idx]

    # ---------- 깊이 신뢰도 / 가림 마스크 ----------
    n_rays = len(rays)
    if sources:
        confs = []
        for i in sources:
            depth_fn = make_source_depth_fn(field_, scene.views[i].camera, cfg.n_coarse, cfg.n_importance, gen)
            confs.append(depth_confidence_batch(rays.pixels, render.rendered_depth, cam,
                                                scene.views[i].camera, depth_fn, cfg.tau))
        confidence = torch.stack([c.confidence for c in confs], -1)
        uncertainty = torch.stack([c.uncertainty for c in confs], -1)
        masks = torch.stack([c.mask for c in confs], -1)
    else:
        confidence = torch.ones((n_rays, 0), dtype=dtype)
        uncertainty = torch.zeros((n_rays, 0), dtype=dtype)
        masks = torch.zeros((n_rays, 0), dtype=torch.bool)
    if step < cfg.mask_warmup_steps:
        masks = torch.ones_like(masks)

    comps = LossComponents()

    # ---------- 특징 일관성 ----------
    if cfg.use_feat and sources:
        metric = FEATURE_METRIC[cfg.feat_mode]
        ref_feat, _ = ref.feature_map.sample(rays.pixels)
        points = render.samples.points.detach()
        per_source = [to_sections(sample_similarities(points, ref_feat, scene.views[i].feature_map,
                                                      scene.views[i].camera, metric)) for i in sources]
        render.feature_similarity = render_feature_similarity(render.weights, torch.stack(per_source, 1))
        surface_sim = None
        if cfg.feat_mode == "on_surface":
            surface = rays.origins + rays.directions * render.rendered_depth[:, None]
            surface_sim = torch.stack([
                sample_similarities(surface[:, None, :], ref_feat, scene.views[i].feature_map,
                                    scene.views[i].camera, metric)[:, 0] for i in sources], -1)
        comps.feat = feature_consistency_loss(render, masks, cfg.feat_mode, surface_sim, warnings)

    # ---------- 깊이 ----------
    if cfg.use_depth and ref.depth_prior is not None:
        u_ray = uncertainty.mean(-1) if sources else torch.ones(n_rays, dtype=dtype)
        comps.depth = depth_loss(render.rendered_depth, ref.depth_prior, u_ray.to(dtype), cfg.depth_mode,
                                 pixels=rays.pixels, valid=render.valid)
        if ref.depth_prior.degenerate:
            warnings["degenerate_calibration"] += 1

    # ---------- 색상 ----------
    if cfg.use_color:
        images = [ref.image_tensor(dtype)] + [scene.views[i].image_tensor(dtype) for i in sources]
        cams = [cam] + [scene.views[i].camera for i in sources]
        color_masks = masks if sources else torch.ones((n_rays, 1), dtype=torch.bool)
        patch_on = cfg.use_patch and step >= cfg.patch_start_step and bool(sources)
        comps.color_pixel, comps.color_patch = color_loss(rays, render, images, cams, None, color_masks,
                                                          patch_on, warnings)

    # ---------- Eikonal ----------
    comps.eik = eikonal_loss(render.field_output.gradient)

    total = total_loss(comps, cfg.alpha, cfg.beta)

    params = state.params
    grads = torch.autograd.grad(total, params, allow_unused=True, retain_graph=True)

    def term_fn(value):
        def fn():
            if not torch.is_tensor(value) or not value.requires_grad:
                return [None] * len(params)
            return torch.autograd.grad(value, params, allow_unused=True, retain_graph=True)
        return fn

    term_grads = {name: term_fn(value) for name, value in comps.items()}
    lr = state.learning_rate(state.step)
    apply_gradients(field_, grads, state, term_grads)

    return LossReport.from_components(
        step, comps, float(total),
        confidence=confidence.detach().cpu().numpy(), uncertainty=uncertainty.detach().cpu().numpy(),
        mask=masks.cpu().numpy(), s=float(field_.s), lr=lr, warnings=warnings,
    )


# =========================================================
# 3) 학습 루프
# =========================================================
def _compact(report: LossReport) -> LossReport:
    return replace(report, confidence=None, uncertainty=None, mask=None)


def train(scene: Union[SceneData, Path, str], config: Optional[TrainConfig] = None,
          out_dir: Optional[Path] = None, resume: Optional[Checkpoint] = None,
          on_report: Optional[Callable[[LossReport], None]] = None, progress: bool = True) -> TrainResult:
    """
    Args:
        scene: SceneData 또는 장면 디렉터리
        out_dir: 체크포인트/metrics.log/맵 스냅샷 출력 위치 (None이면 저장 안 함)
        resume: 이어서 학습할 체크포인트
    Raises:
        NonFiniteLossError, NonFiniteGradientError
    """
    cfg = config or TrainConfig()
    if not isinstance(scene, SceneData):
        scene = load_scene(Path(scene), feature_scale=cfg.feature_scale)

    if resume is not None:
        field_ = resume.field
    else:
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            field_ = ImplicitField(cfg.field)
    state = OptimizerState(field_.parameters(), cfg.total_steps, lr=cfg.lr, warmup_fraction=cfg.warmup_fraction)
    if resume is not None:
        resume.restore_optimizer(state)

    if cfg.use_depth and not scene.has_priors:
        logger.info("깊이 사전이 없어 깊이 손실을 비활성화합니다.")
    dtype = next(field_.parameters()).dtype
    valid_pixels = [v.valid_pixels(dtype) for v in scene.views]
    for v, pool in zip(scene.views, valid_pixels):
        if len(pool) == 0:
            raise ValueError(f"{v.name}: 장면 경계를 지나는 픽셀이 없습니다.")

    metrics_file = None
    if out_dir is not None:
        out_dir = ensure_dir(Path(out_dir))
        metrics_file = open(out_dir / C.METRICS_LOG_FILE, "a" if resume is not None else "w", encoding="utf-8")

    reports: List[LossReport] = []
    last: Optional[LossReport] = None
    t0 = time.perf_counter()
    steps = range(state.step, cfg.total_steps)
    try:
        for step in tqdm(steps, desc="train", disable=not progress, leave=False):
            report = _train_step(field_, scene, cfg, state, valid_pixels, step)
            last = report
            reports.append(_compact(report))
            if on_report is not None:
                on_report(report)

            done = step + 1
            if done % cfg.log_every == 0 or done == cfg.total_steps:
                line = report.format_line()
                logger.info(line)
                if metrics_file is not None:
                    metrics_file.write(line + "\n")
                    metrics_file.flush()
            if out_dir is not None and cfg.ckpt_every > 0 and (done % cfg.ckpt_every == 0 or done == cfg.total_steps):
                save_checkpoint(out_dir / C.CHECKPOINT_FILE, field_, state, {"train_config": cfg.to_dict()})
            if out_dir is not None and cfg.maps_every > 0 and done % cfg.maps_every == 0:
                snap = ensure_dir(out_dir / "maps" / f"step{done:06d}")
                render_maps(field_, scene, 0, stride=2,
                            metric=FEATURE_METRIC[cfg.feat_mode]).save(snap, scene.views[0].name)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    return TrainResult(field_, state, reports, last, time.perf_counter() - t0)
