"""
볼륨 렌더링 (NeuS 방식)
- 계층적 샘플링: 층화 coarse + 가중치 기반 importance
- SDF -> 구간 불투명도 alpha, 투과율 가중치 w_i
- 색상/깊이/특징 유사도 누적

구간 규약:
- N개 샘플 -> N-1개 구간. 구간 i의 색상/거리/유사도는 양 끝 샘플 값의 평균
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from src import constants as C
from src.geometry import RayBatch
from src.field import FieldOutput


# =========================================================
# 1) 타입
# =========================================================
@dataclass
class RaySamples:
    """distances [R,N] (오름차순), points [R,N,3], section_lengths [R,N-1]"""
    distances: torch.Tensor
    points: torch.Tensor
    section_lengths: torch.Tensor

    @classmethod
    def from_distances(cls, rays: RayBatch, distances: torch.Tensor) -> "RaySamples":
        return cls(distances, rays.points_at(distances), distances[:, 1:] - distances[:, :-1])

    @property
    def section_distances(self) -> torch.Tensor:
        return to_sections(self.distances)


@dataclass
class RenderResult:
    weights: torch.Tensor                 # [R,N-1]
    rendered_color: torch.Tensor          # [R,3]
    rendered_depth: torch.Tensor          # [R] 광선 거리
    weight_sum: torch.Tensor              # [R]
    feature_similarity: Optional[torch.Tensor] = None  # [R,S]
    samples: Optional[RaySamples] = None
    field_output: Optional[FieldOutput] = None
    surface_normals: Optional[torch.Tensor] = None     # [R,3] world, 단위 벡터

    @property
    def valid(self) -> torch.Tensor:
        return self.weight_sum > C.WEIGHT_SUM_VALID


def to_sections(values: torch.Tensor) -> torch.Tensor:
    """[R,N,...] 샘플 값 -> [R,N-1,...] 구간 값 (양 끝 평균)"""
    return 0.5 * (values[:, :-1] + values[:, 1:])


# =========================================================
# 2) 샘플링
# =========================================================
def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, n_samples: int,
               generator: Optional[torch.Generator] = None, deterministic: bool = False) -> torch.Tensor:
    """
    구간 가중치 분포에서 역CDF 샘플링

    Args:
        bins: [R,N] 구간 경계
        weights: [R,N-1]
    Returns:
        [R,n_samples]
    """
    weights = weights.detach() + 1e-5
    pdf = weights / weights.sum(-1, keepdim=True)
    cdf = torch.cumsum(pdf, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)

    shape = (cdf.shape[0], n_samples)
    if deterministic:
        u = torch.linspace(0.0, 1.0, n_samples + 2, dtype=bins.dtype, device=bins.device)[1:-1].expand(shape)
    else:
        u = torch.rand(shape, generator=generator, dtype=bins.dtype, device=bins.device)
    u = u.contiguous()

    inds = torch.searchsorted(cdf, u, right=True)
    below = (inds - 1).clamp(min=0)
    above = inds.clamp(max=cdf.shape[-1] - 1)
    cdf_lo, cdf_hi = torch.gather(cdf, 1, below), torch.gather(cdf, 1, above)
    bin_lo, bin_hi = torch.gather(bins, 1, below), torch.gather(bins, 1, above)

    denom = cdf_hi - cdf_lo
    denom = torch.where(denom < 1e-5, torch.ones_like(denom), denom)
    frac = (u - cdf_lo) / denom
    return bin_lo + frac * (bin_hi - bin_lo)


def stratified_distances(rays: RayBatch, n_coarse: int, generator: Optional[torch.Generator] = None,
                         perturb: bool = True) -> torch.Tensor:
    """층마다 하나씩, [R,n_coarse]"""
    dtype = rays.origins.dtype
    k = torch.arange(n_coarse, dtype=dtype, device=rays.origins.device)
    if perturb:
        offsets = torch.rand((len(rays), n_coarse), generator=generator, dtype=dtype, device=rays.origins.device)
    else:
        offsets = torch.full((len(rays), n_coarse), 0.5, dtype=dtype, device=rays.origins.device)
    frac = (k + offsets) / n_coarse
    return rays.near[:, None] + (rays.far - rays.near)[:, None] * frac


def sample_ray(rays: RayBatch, field, n_coarse: int = C.N_COARSE, n_importance: int = C.N_IMPORTANCE,
               generator: Optional[torch.Generator] = None, perturb: bool = True) -> RaySamples:
    """
    coarse 층화 샘플 + coarse 가중치 기반 importance 샘플 (정렬 병합)
    importance용 가중치는 max(s, 64)로 계산. generator가 같으면 결과도 같음
    """
    if n_coarse < 2:
        raise ValueError(f"n_coarse는 2 이상이어야 합니다: {n_coarse}")
    t = stratified_distances(rays, n_coarse, generator, perturb)
    if n_importance <= 0:
        return RaySamples.from_distances(rays, t)

    with torch.no_grad():
        sdf = field.sdf(rays.points_at(t))
        s = torch.clamp(field.s.detach().to(t.dtype), min=C.UPSAMPLE_MIN_S)
        weights = compute_weights(sdf_to_alpha(sdf, s))
        extra = sample_pdf(t, weights, n_importance, generator, deterministic=not perturb)
    merged, _ = torch.sort(torch.cat([t, extra.to(t.dtype)], dim=-1), dim=-1)
    merged = torch.maximum(torch.minimum(merged, rays.far[:, None]), rays.near[:, None])
    return RaySamples.from_distances(rays, merged)


# =========================================================
# 3) 불투명도 / 가중치
# =========================================================
def sdf_to_alpha(sdf: torch.Tensor, s) -> torch.Tensor:
    """
    α_i = max((Φ_s(f_i) - Φ_s(f_{i+1})) / Φ_s(f_i), 0)
    log-sigmoid 차로 계산 (f가 큰 음수여도 안정)
    """
    if sdf.shape[-1] < 2:
        raise ValueError("광선마다 SDF 값이 2개 이상 필요합니다.")
    s = torch.as_tensor(s, dtype=sdf.dtype, device=sdf.device)
    log_prev = F.logsigmoid(s * sdf[..., :-1])
    log_next = F.logsigmoid(s * sdf[..., 1:])
    alpha = 1.0 - torch.exp(log_next - log_prev)
    return alpha.clamp(0.0, 1.0)


def compute_weights(alphas: torch.Tensor) -> torch.Tensor:
    """w_i = α_i Π_{j<i} (1 - α_j)"""
    ones = torch.ones_like(alphas[..., :1])
    transmittance = torch.cumprod(torch.cat([ones, 1.0 - alphas], dim=-1), dim=-1)[..., :-1]
    return alphas * transmittance


# =========================================================
# 4) 렌더
# =========================================================
def render(ray_samples: Optional[RaySamples], weights: torch.Tensor, colors: torch.Tensor,
           distances: torch.Tensor) -> RenderResult:
    """
    색상 Σ w c, 깊이 Σ w t / max(Σ w, 1e-6)

    Args:
        weights: [R,K], colors: [R,K,3], distances: [R,K] (구간 대표 거리)
    """
    weight_sum = weights.sum(-1)
    color = (weights[..., None] * colors).sum(-2)
    depth = (weights * distances).sum(-1) / torch.clamp(weight_sum, min=C.DEPTH_EPS)
    return RenderResult(weights=weights, rendered_color=color, rendered_depth=depth,
                        weight_sum=weight_sum, samples=ray_samples)


def render_feature_similarity(weights: torch.Tensor, similarities: torch.Tensor) -> torch.Tensor:
    """
    A_s = Σ_i w_i sim_{s,i}

    Args:
        weights: [R,K], similarities: [R,S,K] (화면 밖 샘플은 0)
    Returns:
        [R,S]
    """
    return (weights[:, None, :] * similarities).sum(-1)


def render_rays(field, rays: RayBatch, n_coarse: int = C.N_COARSE, n_importance: int = C.N_IMPORTANCE,
                generator: Optional[torch.Generator] = None, perturb: bool = True,
                create_graph: bool = True) -> RenderResult:
    """필드를 광선 묶음에 대해 평가하고 색상/깊이/표면 법선까지 렌더"""
    samples = sample_ray(rays, field, n_coarse, n_importance, generator, perturb)
    view_dirs = rays.directions[:, None, :].expand_as(samples.points)
    out = field.evaluate(samples.points, view_dirs, create_graph=create_graph)

    weights = compute_weights(sdf_to_alpha(out.sdf, field.s))
    result = render(samples, weights, to_sections(out.color), samples.section_distances)
    result.field_output = out

    normals = F.normalize(to_sections(out.gradient), dim=-1, eps=1e-12)
    result.surface_normals = F.normalize((weights[..., None] * normals).sum(-2), dim=-1, eps=1e-12)
    return result


@torch.no_grad()
def render_depth(field, rays: RayBatch, n_coarse: int = C.N_COARSE, n_importance: int = C.N_IMPORTANCE,
                 generator: Optional[torch.Generator] = None, perturb: bool = True) -> RenderResult:
    """깊이만 필요한 보조 렌더 (그래디언트/색상 평가 없음)"""
    samples = sample_ray(rays, field, n_coarse, n_importance, generator, perturb)
    sdf = field.sdf(samples.points)
    weights = compute_weights(sdf_to_alpha(sdf, field.s))
    zeros = torch.zeros((*weights.shape, 3), dtype=weights.dtype, device=weights.device)
    return render(samples, weights, zeros, samples.section_distances)
