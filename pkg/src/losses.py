"""
학습 손실 모음
- 특징 일관성 (accumulate / paper_literal(=sample_normalized) / l1 / l2 / on_surface)
- 순방향-역방향 재투영 오차 기반 깊이 신뢰도 C_d, 불확실도 U_d, 가림 마스크 M
- 단안 깊이 사전의 최소제곱 보정 (a, b) 과 불확실도 가중 깊이 손실
- 색상 워핑 (픽셀 L1 + 평면 호모그래피 패치 SSIM)
- Eikonal, 총합
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src import constants as C
from src.features import FeatureMap, bilinear_sample, similarity
from src.geometry import (OUT_OF_VIEW, Camera, RayBatch, apply_homography, plane_homography,
                          project_points, reproject, reproject_pixels, z_to_distance)
from src.rendering import RenderResult
from src.utils import NonFiniteLossError

logger = logging.getLogger(__name__)

# 특징 모드 -> 샘플 유사도 지표
FEATURE_METRIC = {"accumulate": "cos", "paper_literal": "cos", "sample_normalized": "cos", "l1": "l1", "l2": "l2", "on_surface": "cos"}


# =========================================================
# 1) 타입
# =========================================================
@dataclass
class DepthPrior:
    """단안 깊이 사전 D̂ (임의 스케일/시프트, 광선 거리 규약). a, b는 보정 결과"""
    map: np.ndarray
    a: float = 1.0
    b: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=np.float64)
        if self.map.ndim != 2:
            raise ValueError(f"깊이 사전은 [H,W]여야 합니다: {self.map.shape}")

    def lookup(self, pixels) -> np.ndarray:
        """가장 가까운 픽셀 값. 범위 밖은 NaN"""
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        h, w = self.map.shape
        u = np.rint(px[:, 0]).astype(np.int64)
        v = np.rint(px[:, 1]).astype(np.int64)
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        out = np.full(len(px), np.nan)
        out[inside] = self.map[v[inside], u[inside]]
        return out

    def lookup_tensor(self, pixels: torch.Tensor) -> torch.Tensor:
        values = self.lookup(pixels.detach().cpu().numpy())
        return torch.as_tensor(values, dtype=pixels.dtype, device=pixels.device)

    def calibrated(self, a: Optional[float] = None, b: Optional[float] = None) -> np.ndarray:
        a = self.a if a is None else a
        b = self.b if b is None else b
        return a * self.map + b


@dataclass
class SparseKeypoints:
    """한 시점의 (픽셀, 광선 거리 D̄) 목록"""
    pixels: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if len(self.pixels) != len(self.depths):
            raise ValueError("픽셀 수와 깊이 수가 다릅니다.")
        if (self.depths <= 0).any():
            raise ValueError("키포인트 깊이는 0보다 커야 합니다.")

    def __len__(self) -> int:
        return len(self.depths)

    @classmethod
    def from_points(cls, points: np.ndarray, visibility: Sequence[Sequence[int]], view_index: int,
                    camera: Camera) -> "SparseKeypoints":
        """world 점 + 가시 시점 목록 -> view_index 시점 키포인트"""
        pixels, depths = [], []
        for p, vis in zip(np.asarray(points, dtype=np.float64), visibility):
            if view_index not in vis:
                continue
            pix = _project_world(p, camera)
            if pix is OUT_OF_VIEW:
                continue
            pixels.append(pix)
            depths.append(float(np.linalg.norm(p - camera.center)))
        return cls(np.asarray(pixels).reshape(-1, 2), np.asarray(depths))


def _project_world(point: np.ndarray, camera: Camera):
    pixels, ok = project_points(torch.as_tensor(np.asarray(point, dtype=np.float64)), camera)
    return pixels.numpy() if bool(ok) else OUT_OF_VIEW


@dataclass
class LossComponents:
    feat: Union[torch.Tensor, float] = 0.0
    depth: Union[torch.Tensor, float] = 0.0
    color_pixel: Union[torch.Tensor, float] = 0.0
    color_patch: Union[torch.Tensor, float] = 0.0
    eik: Union[torch.Tensor, float] = 0.0

    def items(self):
        return [("feat", self.feat), ("depth", self.depth), ("color_pixel", self.color_pixel),
                ("color_patch", self.color_patch), ("eik", self.eik)]

    def as_floats(self) -> Dict[str, float]:
        return {k: float(v) for k, v in self.items()}


@dataclass
class LossReport:
    """스텝별 손실 기록 (metrics.log 한 줄)"""
    step: int
    l_feat: float
    l_depth: float
    l_color_pixel: float
    l_color_patch: float
    l_eik: float
    total: float
    confidence: Optional[np.ndarray] = None   # [R,S] C_d
    uncertainty: Optional[np.ndarray] = None  # [R,S] U_d
    mask: Optional[np.ndarray] = None         # [R,S] M^occ
    s: float = float("nan")
    lr: float = float("nan")
    warnings: Counter = field(default_factory=Counter)

    @classmethod
    def from_components(cls, step: int, comps: LossComponents, total: float, **kwargs) -> "LossReport":
        f = comps.as_floats()
        return cls(step=step, l_feat=f["feat"], l_depth=f["depth"], l_color_pixel=f["color_pixel"],
                   l_color_patch=f["color_patch"], l_eik=f["eik"], total=float(total), **kwargs)

    @property
    def l_color(self) -> float:
        return self.l_color_pixel + self.l_color_patch

    @property
    def mask_fraction(self) -> float:
        if self.mask is None or self.mask.size == 0:
            return float("nan")
        return float(np.mean(self.mask))

    @property
    def mean_confidence(self) -> float:
        if self.confidence is None or self.confidence.size == 0:
            return float("nan")
        return float(np.mean(self.confidence))

    def to_dict(self) -> Dict[str, float]:
        return {"step": self.step, "total": self.total, "feat": self.l_feat, "depth": self.l_depth,
                "color_pixel": self.l_color_pixel, "color_patch": self.l_color_patch, "eik": self.l_eik,
                "s": self.s, "lr": self.lr, "mask": self.mask_fraction, "conf": self.mean_confidence}

    def format_line(self) -> str:
        d = self.to_dict()
        parts = [f"step={self.step}"] + [f"{k}={d[k]:.9g}" for k in
                                         ("total", "feat", "depth", "color_pixel", "color_patch", "eik",
                                          "s", "lr", "mask", "conf")]
        parts += [f"warn_{k}={v}" for k, v in sorted(self.warnings.items())]
        return " ".join(parts)

    @staticmethod
    def parse_line(line: str) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for token in line.split():
            key, _, value = token.partition("=")
            out[key] = float(value)
        return out


# =========================================================
# 2) 특징 일관성
# =========================================================
def sample_similarities(points: torch.Tensor, ref_features: torch.Tensor, fmap_src: FeatureMap,
                        cam_src: Camera, metric: str = "cos") -> torch.Tensor:
    """
    샘플점을 source 시점에 투영해 ref 특징과의 유사도

    Args:
        points: [R,N,3], ref_features: [R,C]
    Returns:
        [R,N], 화면 밖 샘플은 0
    """
    pixels, in_view = project_points(points, cam_src)
    feats, valid = fmap_src.sample(pixels)
    sim = similarity(ref_features[:, None, :].expand_as(feats), feats, metric)
    return torch.where(in_view & valid, sim, torch.zeros_like(sim))


def feature_consistency_loss(render: RenderResult, masks: torch.Tensor, mode: str = "accumulate",
                             surface_similarity: Optional[torch.Tensor] = None,
                             warnings: Optional[Counter] = None,
                             n_samples: Optional[int] = None) -> torch.Tensor:
    """
    Args:
        render: feature_similarity [R,S] (A = Σ w sim)와 weights [R,N-1]를 가진 결과
        masks: [R,S] M^occ
        surface_similarity: on_surface 모드의 표면점 유사도 [R,S]
        n_samples: paper_literal 모드의 광선당 샘플 수 N. 생략하면 render.samples 에서 (없으면 구간 수 + 1)
    Returns:
        마스크된 (광선, source) 쌍 평균. 쌍이 없으면 0 (warnings['empty_feature_mask'] 증가)
    """
    if mode not in C.FEATURE_MODES:
        raise ValueError(f"알 수 없는 특징 모드: {mode} (가능: {C.FEATURE_MODES})")
    m = masks.to(render.weights.dtype)
    if mode == "on_surface":
        # 가중치 합이 작은 광선은 표면점이 정의되지 않음
        m = m * render.valid.to(m.dtype)[:, None]
    count = m.sum()
    if float(count) == 0.0:
        if warnings is not None:
            warnings["empty_feature_mask"] += 1
        return torch.zeros((), dtype=render.weights.dtype, device=render.weights.device)

    if mode == "on_surface":
        if surface_similarity is None:
            raise ValueError("on_surface 모드에는 surface_similarity가 필요합니다.")
        term = 1.0 - surface_similarity
    else:
        acc = render.feature_similarity
        if mode == "accumulate":
            term = 1.0 - acc
        elif mode in ("paper_literal", "sample_normalized"):
            if n_samples is None:
                n_samples = (render.samples.distances.shape[-1] if render.samples is not None
                             else render.weights.shape[-1] + 1)
            term = 1.0 - acc / n_samples
        else:
            term = -acc
    return (m * term).sum() / count


# =========================================================
# 3) 깊이 신뢰도 (순방향-역방향 재투영)
# =========================================================
class Confidence(NamedTuple):
    confidence: torch.Tensor   # C_d
    uncertainty: torch.Tensor  # U_d = 1 - C_d
    mask: torch.Tensor         # [C_d > tau]
    error: torch.Tensor        # 재투영 오차 (계산 불가는 inf)


def confidence_from_error(error: torch.Tensor, tau: float = C.TAU_MASK) -> Confidence:
    """C_d = exp(-e) (e <= 1), 0 (e > 1)"""
    error = torch.as_tensor(error)
    ok = torch.isfinite(error) & (error <= 1.0)
    conf = torch.where(ok, torch.exp(-torch.where(ok, error, torch.zeros_like(error))), torch.zeros_like(error))
    return Confidence(conf, 1.0 - conf, conf > tau, error)


def _ray_length_factor(pixels: torch.Tensor, camera: Camera) -> torch.Tensor:
    """광선 거리 / z"""
    return z_to_distance(torch.ones_like(pixels[..., 0]), pixels, camera)


SourceDepthFn = Callable[[torch.Tensor], Tuple[torch.Tensor, torch.Tensor]]


def depth_confidence_batch(pixels: torch.Tensor, distances: torch.Tensor, cam_ref: Camera, cam_src: Camera,
                           source_depth_fn: SourceDepthFn, tau: float = C.TAU_MASK) -> Confidence:
    """
    Args:
        pixels: [R,2] ref 픽셀, distances: [R] 렌더 깊이 (광선 거리)
        source_depth_fn: source 픽셀 [M,2] -> (광선 거리 [M], valid [M])
    """
    pixels = pixels.detach()
    distances = distances.detach()
    n = pixels.shape[0]
    error = torch.full((n,), float("inf"), dtype=pixels.dtype, device=pixels.device)

    ok = torch.isfinite(distances) & (distances > 0)
    if bool(ok.any()):
        idx = torch.nonzero(ok).squeeze(-1)
        px = pixels[idx]
        z_r = distances[idx] / _ray_length_factor(px, cam_ref)
        s_uv, in_src = reproject_pixels(px, z_r, cam_ref, cam_src)
        idx, px, s_uv = idx[in_src], px[in_src], s_uv[in_src]
        if idx.numel():
            d_s, valid_s = source_depth_fn(s_uv)
            good = valid_s & torch.isfinite(d_s) & (d_s > 0)
            idx, px, s_uv, d_s = idx[good], px[good], s_uv[good], d_s[good]
            if idx.numel():
                z_s = d_s / _ray_length_factor(s_uv, cam_src)
                r_hat, in_ref = reproject_pixels(s_uv, z_s, cam_src, cam_ref)
                e = torch.linalg.norm(px - r_hat, dim=-1)
                error[idx] = torch.where(in_ref, e, torch.full_like(e, float("inf")))
    return confidence_from_error(error, tau)


def depth_confidence(ray_pixel, rendered_depth: float, cam_ref: Camera, cam_src: Camera,
                     source_depth_fn: Callable[[np.ndarray], Optional[float]],
                     tau: float = C.TAU_MASK) -> Tuple[float, float, bool]:
    """
    단일 픽셀 버전. (C_d, U_d, M^occ)
    rendered_depth, source_depth_fn 반환값 모두 광선 거리. 투영이 화면 밖이면 C_d = 0
    """
    pixel = np.asarray(ray_pixel, dtype=np.float64).reshape(2)
    if not rendered_depth > 0:
        raise ValueError(f"렌더 깊이는 0보다 커야 합니다: {rendered_depth}")
    factor = float(_ray_length_factor(torch.as_tensor(pixel), cam_ref))
    s_uv = reproject(pixel, rendered_depth / factor, cam_ref, cam_src)
    error = float("inf")
    if s_uv is not OUT_OF_VIEW:
        d_s = source_depth_fn(s_uv)
        if d_s is not None and np.isfinite(d_s) and d_s > 0:
            factor_s = float(_ray_length_factor(torch.as_tensor(s_uv), cam_src))
            r_hat = reproject(s_uv, d_s / factor_s, cam_src, cam_ref)
            if r_hat is not OUT_OF_VIEW:
                error = float(np.linalg.norm(pixel - r_hat))
    conf = confidence_from_error(torch.tensor(error, dtype=torch.float64), tau)
    return float(conf.confidence), float(conf.uncertainty), bool(conf.mask)


# =========================================================
# 4) 깊이 사전 보정 / 깊이 손실
# =========================================================
class Calibration(NamedTuple):
    a: float
    b: float
    degenerate: bool


def fit_affine(x, y) -> Calibration:
    """min Σ (a x + b - y)^2, 2x2 정규방정식 (보상 합)"""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    n = len(x)
    if n < 2:
        return Calibration(1.0, 0.0, True)
    sx, sy = math.fsum(x), math.fsum(y)
    sxx, sxy = math.fsum(x * x), math.fsum(x * y)
    det = n * sxx - sx * sx
    if det <= 1e-12 * max(1.0, n * sxx):
        return Calibration(1.0, 0.0, True)
    a = (n * sxy - sx * sy) / det
    b = (sy - a * sx) / n
    return Calibration(float(a), float(b), False)


def calibrate_depth(prior: DepthPrior, keypoints: Optional[SparseKeypoints]) -> Calibration:
    """
    D̄ ≈ a D̂ + b 의 최소제곱 해
    키포인트 < 2개, 사전값이 모두 같음, a <= 0 이면 (1, 0)과 degenerate=True
    """
    if keypoints is None or len(keypoints) < 2:
        logger.warning("키포인트가 부족해 깊이 보정을 건너뜁니다 (a=1, b=0)")
        return Calibration(1.0, 0.0, True)
    result = fit_affine(prior.lookup(keypoints.pixels), keypoints.depths)
    if not result.degenerate and result.a <= 0:
        logger.warning(f"깊이 보정 기울기가 양수가 아닙니다 (a={result.a:.4g}); a=1, b=0 사용")
        return Calibration(1.0, 0.0, True)
    return result


def depth_residual(prior: DepthPrior, keypoints: SparseKeypoints, a: float, b: float) -> float:
    """Σ (a D̂ + b - D̄)^2 (진단용)"""
    pred = a * prior.lookup(keypoints.pixels) + b
    keep = np.isfinite(pred)
    return math.fsum((pred[keep] - keypoints.depths[keep]) ** 2)


def depth_loss(rendered_depths: torch.Tensor, prior: DepthPrior, uncertainties: torch.Tensor,
               mode: str = "uncertainty", pixels: Optional[torch.Tensor] = None,
               valid: Optional[torch.Tensor] = None, prior_values: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    - uncertainty: 유효 광선 평균 U_d (a D̂ + b - D_pred)^2
    - mono: 배치마다 D̂를 (detach된) D_pred에 최소제곱 정렬 후 가중치 없는 제곱오차

    Args:
        rendered_depths: [R] 렌더 깊이
        uncertainties: [R] 광선별 U_d
        pixels: [R,2] (prior_values가 없을 때 사전 조회용)
        valid: [R] 렌더 깊이 유효 여부 (weight_sum 임계값)
    """
    if mode not in C.DEPTH_MODES:
        raise ValueError(f"알 수 없는 깊이 모드: {mode} (가능: {C.DEPTH_MODES})")
    if prior_values is None:
        if pixels is None:
            raise ValueError("pixels 또는 prior_values가 필요합니다.")
        prior_values = prior.lookup_tensor(pixels)
    prior_values = prior_values.to(rendered_depths.dtype)
    keep = torch.isfinite(prior_values) & torch.isfinite(rendered_depths)
    if valid is not None:
        keep = keep & valid
    zero = torch.zeros((), dtype=rendered_depths.dtype, device=rendered_depths.device)
    if not bool(keep.any()):
        return zero

    d_pred = rendered_depths[keep]
    d_hat = prior_values[keep]
    if mode == "uncertainty":
        target = prior.a * d_hat + prior.b
        return (uncertainties[keep].to(d_pred.dtype) * (target - d_pred) ** 2).mean()

    fit = fit_affine(d_hat.detach().cpu().numpy(), d_pred.detach().cpu().numpy())
    target = fit.a * d_hat + fit.b
    return ((target - d_pred) ** 2).mean()


# =========================================================
# 5) 색상 워핑 (픽셀 L1 + 패치 SSIM)
# =========================================================
def patch_offsets(half: int = C.PATCH_HALF, dtype=torch.float64, device=None) -> torch.Tensor:
    """[(2h+1)^2, 2] (dx, dy), 행 우선"""
    r = torch.arange(-half, half + 1, dtype=dtype, device=device)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1)


def ssim(patch_a: torch.Tensor, patch_b: torch.Tensor) -> torch.Tensor:
    """
    단일 윈도우 SSIM (모분산), 마지막 두 축 전체가 한 윈도우
    C1 = 0.01^2, C2 = 0.03^2
    """
    a = patch_a.reshape(*patch_a.shape[:-2], -1)
    b = patch_b.reshape(*patch_b.shape[:-2], -1)
    mu_a, mu_b = a.mean(-1), b.mean(-1)
    var_a = ((a - mu_a[..., None]) ** 2).mean(-1)
    var_b = ((b - mu_b[..., None]) ** 2).mean(-1)
    cov = ((a - mu_a[..., None]) * (b - mu_b[..., None])).mean(-1)
    num = (2 * mu_a * mu_b + C.SSIM_C1) * (2 * cov + C.SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + C.SSIM_C1) * (var_a + var_b + C.SSIM_C2)
    return num / den


_LUMA = (0.299, 0.587, 0.114)


def _gray(image: torch.Tensor) -> torch.Tensor:
    """[3,H,W] -> [1,H,W]"""
    if image.shape[0] == 1:
        return image
    w = torch.as_tensor(_LUMA, dtype=image.dtype, device=image.device)
    return (image * w[:, None, None]).sum(0, keepdim=True)


def color_loss(rays: RayBatch, render: RenderResult, images: Sequence[torch.Tensor], cameras: Sequence[Camera],
               normals: Optional[torch.Tensor], masks: torch.Tensor, patch_enabled: bool,
               warnings: Optional[Counter] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    images[0]/cameras[0]이 reference, 나머지가 source (masks [R,S] 열 순서와 동일)

    - l_pixel: 마스크된 광선 평균 |I(r) - Î(r)|_1 (RGB 합). 광선 마스크 = source 중 하나라도 M=1
    - l_patch: 마스크된 (광선, source) 쌍 평균 1 - SSIM(P_ref, P_warp), 5x5 회색조 패치
      경계에 걸친 패치는 건너뛰고 warnings['skipped_patches']에 누적
    """
    ref_image, ref_cam = images[0], cameras[0]
    dtype = render.rendered_color.dtype
    zero = torch.zeros((), dtype=dtype, device=render.rendered_color.device)

    gt, _ = bilinear_sample(ref_image.to(dtype), rays.pixels.to(dtype))
    ray_mask = masks.any(dim=-1).to(dtype)
    count = ray_mask.sum()
    l1 = (gt - render.rendered_color).abs().sum(-1)
    l_pixel = (ray_mask * l1).sum() / count if float(count) > 0 else zero

    if not patch_enabled or len(cameras) < 2:
        return l_pixel, zero
    normals = render.surface_normals if normals is None else normals
    if normals is None:
        raise ValueError("패치 손실에는 표면 법선이 필요합니다.")

    offsets = patch_offsets(dtype=dtype, device=ref_image.device)
    ref_patch_px = rays.pixels.to(dtype)[:, None, :] + offsets[None]          # [R,P,2]
    ref_vals, ref_ok = bilinear_sample(_gray(ref_image.to(dtype)), ref_patch_px)
    ref_ok = ref_ok.all(-1) & (ref_patch_px >= 0).all(-1).all(-1)
    ref_ok = ref_ok & (ref_patch_px[..., 0] <= ref_cam.width - 1).all(-1) & (ref_patch_px[..., 1] <= ref_cam.height - 1).all(-1)

    surface = rays.origins + rays.directions * render.rendered_depth[:, None]
    _, _, R_r, t_r = ref_cam.tensors(surface)
    points_ref = surface @ R_r.T + t_r
    normals_ref = normals @ R_r.T

    total = zero
    pairs = 0
    skipped = 0
    side = 2 * C.PATCH_HALF + 1
    for s_idx, (image, cam) in enumerate(zip(images[1:], cameras[1:])):
        H = plane_homography(ref_cam, cam, normals_ref, points_ref)
        src_px = apply_homography(H, ref_patch_px)
        src_vals, src_ok = bilinear_sample(_gray(image.to(dtype)), src_px)
        inside = (src_px[..., 0] >= 0) & (src_px[..., 0] <= cam.width - 1) & \
                 (src_px[..., 1] >= 0) & (src_px[..., 1] <= cam.height - 1)
        ok = ref_ok & src_ok.all(-1) & inside.all(-1) & torch.isfinite(src_px).all(-1).all(-1)
        use = masks[:, s_idx] & render.valid
        skipped += int((use & ~ok).sum())
        use = use & ok
        if bool(use.any()):
            sa = ref_vals[use, :, 0].reshape(-1, side, side)
            sb = src_vals[use, :, 0].reshape(-1, side, side)
            total = total + (1.0 - ssim(sa, sb)).sum()
            pairs += int(use.sum())

    if warnings is not None and skipped:
        warnings["skipped_patches"] += skipped
    l_patch = total / pairs if pairs else zero
    return l_pixel, l_patch


# =========================================================
# 6) Eikonal / 총합
# =========================================================
def eikonal_loss(gradients: torch.Tensor) -> torch.Tensor:
    """mean (|∇f| - 1)^2"""
    return ((torch.linalg.norm(gradients, dim=-1) - 1.0) ** 2).mean()


def total_loss(components: LossComponents, alpha: float = C.ALPHA_DEPTH, beta: float = C.BETA_EIKONAL):
    """
    L = L_feat + α L_depth + (L_pixel + L_patch) + β L_eik

    Raises:
        NonFiniteLossError: 유한하지 않은 항 (항 이름 포함)
    """
    for name, value in components.items():
        v = float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return (components.feat + alpha * components.depth
            + (components.color_pixel + components.color_patch) + beta * components.eik)
