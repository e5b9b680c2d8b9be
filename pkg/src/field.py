"""
미분 가능한 SDF 필드 + 색상 헤드
- NeuS 방식 기하 초기화 (반지름 0.6 구, 내부 음수)
- 공간 그래디언트는 autograd (Eikonal 항, 법선)
- 렌더링 선명도 s = exp(10 * variance), log 공간에서 학습
- Adam + warmup/cosine 스케줄, 체크포인트 저장/복원
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src import constants as C
from src.scene_io import read_tensor_archive, write_tensor_archive
from src.utils import NonFiniteGradientError, SceneFormatError


# =========================================================
# 1) 설정 / 출력 타입
# =========================================================
@dataclass
class FieldConfig:
    hidden_layers: int = C.SDF_HIDDEN_LAYERS
    hidden_dim: int = C.SDF_HIDDEN_DIM
    pos_bands: int = C.SDF_POS_BANDS
    skip_layers: Tuple[int, ...] = C.SDF_SKIP_LAYERS
    feature_dim: int = C.SDF_FEATURE_DIM
    color_layers: int = C.COLOR_HIDDEN_LAYERS
    color_dim: int = C.COLOR_HIDDEN_DIM
    dir_bands: int = C.COLOR_DIR_BANDS
    init_radius: float = C.GEOMETRIC_INIT_RADIUS
    init_variance: float = C.INIT_VARIANCE

    @classmethod
    def from_dict(cls, d: Mapping) -> "FieldConfig":
        d = dict(d)
        if "skip_layers" in d:
            d["skip_layers"] = tuple(d["skip_layers"])
        return cls(**d)


@dataclass
class FieldOutput:
    sdf: torch.Tensor        # [...]
    gradient: torch.Tensor   # [...,3]
    color: torch.Tensor      # [...,3], [0,1]
    feature: torch.Tensor    # [...,F]


def positional_encoding(x: torch.Tensor, n_bands: int) -> torch.Tensor:
    """[x, sin(2^k x), cos(2^k x)]_k"""
    out = [x]
    for k in range(n_bands):
        freq = 2.0 ** k
        out.append(torch.sin(freq * x))
        out.append(torch.cos(freq * x))
    return torch.cat(out, dim=-1)


class _VarianceMixin:
    """s 관련 공통부분 (variance 파라미터를 가진 모듈용)"""

    @property
    def s(self) -> torch.Tensor:
        return torch.exp(self.variance * C.VARIANCE_SCALE)

    def field_gradient(self, points: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        with torch.enable_grad():
            x = points if points.requires_grad else points.detach().requires_grad_(True)
            sdf, _ = self.forward_sdf(x)
            (grad,) = torch.autograd.grad(sdf, x, torch.ones_like(sdf),
                                          create_graph=create_graph or points.requires_grad)
        return grad

    def evaluate(self, points: torch.Tensor, view_dirs: torch.Tensor,
                 create_graph: bool = True) -> FieldOutput:
        """SDF, 그래디언트, 색상, 특징을 한 번에"""
        with torch.enable_grad():
            x = points if points.requires_grad else points.detach().requires_grad_(True)
            sdf, feature = self.forward_sdf(x)
            (grad,) = torch.autograd.grad(sdf, x, torch.ones_like(sdf),
                                          create_graph=create_graph, retain_graph=True)
        color = self.color(x, view_dirs, grad, feature)
        return FieldOutput(sdf=sdf, gradient=grad, color=color, feature=feature)


# =========================================================
# 2) ImplicitField (MLP)
# =========================================================
class ImplicitField(_VarianceMixin, nn.Module):
    """SDF 트렁크 + 색상 헤드 + 단일 variance 스칼라"""

    def __init__(self, config: Optional[FieldConfig] = None):
        super().__init__()
        self.config = config or FieldConfig()
        cfg = self.config

        in_dim = 3 + 3 * 2 * cfg.pos_bands
        dims = [in_dim] + [cfg.hidden_dim] * cfg.hidden_layers + [1 + cfg.feature_dim]
        self.num_layers = len(dims)
        self.skip_layers = tuple(cfg.skip_layers)
        for l in self.skip_layers:
            if not (0 < l < self.num_layers - 1) or dims[l] <= in_dim:
                raise ValueError(f"skip 레이어 설정이 잘못되었습니다: {self.skip_layers}")

        self.sdf_layers = nn.ModuleList()
        for l in range(self.num_layers - 1):
            out_dim = dims[l + 1] - in_dim if (l + 1) in self.skip_layers else dims[l + 1]
            lin = nn.Linear(dims[l], out_dim)
            self._geometric_init(lin, l, dims, in_dim, out_dim)
            self.sdf_layers.append(lin)

        dir_dim = 3 + 3 * 2 * cfg.dir_bands
        cdims = [3 + dir_dim + 3 + cfg.feature_dim] + [cfg.color_dim] * cfg.color_layers + [3]
        self.color_layers = nn.ModuleList(nn.Linear(cdims[l], cdims[l + 1]) for l in range(len(cdims) - 1))

        self.variance = nn.Parameter(torch.tensor(float(cfg.init_variance)))
        self.softplus = nn.Softplus(beta=100)

    def _geometric_init(self, lin: nn.Linear, l: int, dims: List[int], in_dim: int, out_dim: int) -> None:
        cfg = self.config
        if l == self.num_layers - 2:
            nn.init.normal_(lin.weight, mean=math.sqrt(math.pi) / math.sqrt(dims[l]), std=1e-4)
            nn.init.constant_(lin.bias, -cfg.init_radius)
        elif l == 0:
            nn.init.constant_(lin.bias, 0.0)
            nn.init.constant_(lin.weight[:, 3:], 0.0)
            nn.init.normal_(lin.weight[:, :3], 0.0, math.sqrt(2) / math.sqrt(out_dim))
        elif l in self.skip_layers:
            nn.init.constant_(lin.bias, 0.0)
            nn.init.normal_(lin.weight, 0.0, math.sqrt(2) / math.sqrt(out_dim))
            nn.init.constant_(lin.weight[:, -(in_dim - 3):], 0.0)
        else:
            nn.init.constant_(lin.bias, 0.0)
            nn.init.normal_(lin.weight, 0.0, math.sqrt(2) / math.sqrt(out_dim))

    def forward_sdf(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        inputs = positional_encoding(points, self.config.pos_bands)
        x = inputs
        for l, lin in enumerate(self.sdf_layers):
            if l in self.skip_layers:
                x = torch.cat([x, inputs], dim=-1) / math.sqrt(2)
            x = lin(x)
            if l < self.num_layers - 2:
                x = self.softplus(x)
        return x[..., 0], x[..., 1:]

    def sdf(self, points: torch.Tensor) -> torch.Tensor:
        return self.forward_sdf(points)[0]

    def color(self, points, view_dirs, normals, features) -> torch.Tensor:
        x = torch.cat([points, positional_encoding(view_dirs, self.config.dir_bands), normals, features], dim=-1)
        for l, lin in enumerate(self.color_layers):
            x = lin(x)
            if l < len(self.color_layers) - 1:
                x = F.relu(x)
        return torch.sigmoid(x)


# =========================================================
# 3) AnalyticField (정확한 SDF를 같은 인터페이스로)
# =========================================================
class AnalyticField(_VarianceMixin, nn.Module):
    """
    해석적 SDF 대용 필드 (예: f(x) = |x| - 0.5)
    - 테스트 오라클, 학습 수렴 확인용
    - 색상은 albedo_fn이 없으면 0.5 회색
    """

    def __init__(self, sdf_fn: Callable[[torch.Tensor], torch.Tensor], s: float = 64.0,
                 albedo_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None):
        super().__init__()
        self.sdf_fn = sdf_fn
        self.albedo_fn = albedo_fn
        self.variance = nn.Parameter(torch.tensor(math.log(s) / C.VARIANCE_SCALE, dtype=torch.float64))

    @classmethod
    def sphere(cls, radius: float = 0.5, center=(0.0, 0.0, 0.0), s: float = 64.0) -> "AnalyticField":
        c = torch.as_tensor(center, dtype=torch.float64)
        return cls(lambda p: torch.linalg.norm(p - c.to(p), dim=-1) - radius, s=s)

    def forward_sdf(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        sdf = self.sdf_fn(points)
        return sdf, torch.zeros_like(points[..., :1])

    def sdf(self, points: torch.Tensor) -> torch.Tensor:
        return self.sdf_fn(points)

    def color(self, points, view_dirs, normals, features) -> torch.Tensor:
        if self.albedo_fn is not None:
            return self.albedo_fn(points).clamp(0.0, 1.0)
        return torch.full_like(points, 0.5)


# =========================================================
# 4) 모듈 수준 연산
# =========================================================
def eval_sdf(field: nn.Module, points: torch.Tensor) -> torch.Tensor:
    return field.sdf(points)


def eval_gradient(field: nn.Module, points: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """
    공간 그래디언트 df/dx
    원점(구 대용 필드의 특이점)에서는 autograd가 0 벡터를 돌려줌 (유한값)
    """
    return field.field_gradient(points, create_graph=create_graph)


def eval_color(field: nn.Module, points, view_dirs, normals, features) -> torch.Tensor:
    return field.color(points, view_dirs, normals, features)


# =========================================================
# 5) 옵티마이저 (Adam + warmup/cosine)
# =========================================================
class OptimizerState:
    """
    Adam 상태 + 스텝 카운터
    학습률은 스텝 번호에서 바로 계산하므로 체크포인트 재개 시 스케줄이 어긋나지 않음
    """

    def __init__(self, params: Sequence[torch.nn.Parameter], total_steps: int,
                 lr: float = C.LEARNING_RATE, warmup_fraction: float = C.WARMUP_FRACTION,
                 betas: Tuple[float, float] = C.ADAM_BETAS, eps: float = C.ADAM_EPS,
                 final_factor: float = 0.05):
        self.params = list(params)
        self.base_lr = float(lr)
        self.total_steps = max(1, int(total_steps))
        self.warmup_steps = int(round(warmup_fraction * self.total_steps))
        self.final_factor = final_factor
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        self.step = 0

    def learning_rate(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        factor = (math.cos(math.pi * progress) + 1.0) * 0.5 * (1 - self.final_factor) + self.final_factor
        return self.base_lr * factor

    def moments(self, names: Sequence[str]) -> Dict[str, np.ndarray]:
        """체크포인트용 Adam 1/2차 모멘트"""
        out: Dict[str, np.ndarray] = {}
        for name, p in zip(names, self.params):
            st = self.optimizer.state.get(p)
            if not st:
                continue
            out[f"adam.m.{name}"] = st["exp_avg"].detach().cpu().numpy()
            out[f"adam.v.{name}"] = st["exp_avg_sq"].detach().cpu().numpy()
            out[f"adam.step.{name}"] = np.array([float(st["step"])], dtype=np.float32)
        return out

    def load_moments(self, names: Sequence[str], tensors: Mapping[str, np.ndarray]) -> None:
        for name, p in zip(names, self.params):
            if f"adam.m.{name}" not in tensors:
                continue
            self.optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"adam.step.{name}"][0]), dtype=torch.float32),
                "exp_avg": torch.as_tensor(tensors[f"adam.m.{name}"], dtype=p.dtype).reshape(p.shape).clone(),
                "exp_avg_sq": torch.as_tensor(tensors[f"adam.v.{name}"], dtype=p.dtype).reshape(p.shape).clone(),
            }


def _all_finite(grads: Sequence[Optional[torch.Tensor]]) -> bool:
    return all(g is None or bool(torch.isfinite(g).all()) for g in grads)


def apply_gradients(field: nn.Module, grads: Sequence[Optional[torch.Tensor]], state: OptimizerState,
                    term_grads: Optional[Mapping[str, Callable[[], Sequence[Optional[torch.Tensor]]]]] = None
                    ) -> nn.Module:
    """
    Adam 한 스텝. s는 variance(log 공간)로 갱신되므로 항상 양수

    Args:
        grads: state.params 순서의 그래디언트 (None은 0으로 취급)
        term_grads: 손실 항 이름 -> 해당 항 그래디언트 계산 함수. NaN 원인 진단용
    Raises:
        NonFiniteGradientError: NaN/Inf 그래디언트. 원인 항 이름 포함
    """
    grads = list(grads)
    if len(grads) != len(state.params):
        raise ValueError(f"그래디언트 개수 불일치: {len(grads)} != {len(state.params)}")
    for p, g in zip(state.params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"그래디언트 shape 불일치: {tuple(g.shape)} != {tuple(p.shape)}")

    if not _all_finite(grads):
        culprit = "total"
        for name, fn in (term_grads or {}).items():
            if not _all_finite(fn()):
                culprit = name
                break
        raise NonFiniteGradientError(culprit)

    for p, g in zip(state.params, grads):
        p.grad = torch.zeros_like(p) if g is None else g.detach().clone()

    lr = state.learning_rate(state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return field


# =========================================================
# 6) 체크포인트
# =========================================================
@dataclass
class Checkpoint:
    field: ImplicitField
    step: int
    meta: Dict = dc_field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = dc_field(default_factory=dict)

    def restore_optimizer(self, state: OptimizerState) -> None:
        names = [n for n, _ in self.field.named_parameters()]
        state.load_moments(names, self.tensors)
        state.step = self.step


def save_checkpoint(path: Path, field: ImplicitField, state: Optional[OptimizerState] = None,
                    meta: Optional[Dict] = None) -> None:
    tensors = {f"field.{k}": v.detach().cpu().numpy() for k, v in field.state_dict().items()}
    step = 0
    if state is not None:
        names = [n for n, _ in field.named_parameters()]
        tensors.update(state.moments(names))
        step = state.step
    full_meta = dict(meta or {})
    full_meta["field_config"] = asdict(field.config)
    full_meta["step"] = step
    write_tensor_archive(path, tensors, full_meta)


def load_checkpoint(path: Path) -> Checkpoint:
    tensors, meta = read_tensor_archive(path)
    if "field_config" not in meta:
        raise SceneFormatError(path, "field_config 메타 정보가 없습니다.")
    field = ImplicitField(FieldConfig.from_dict(meta["field_config"]))
    state_dict = {}
    for k, ref in field.state_dict().items():
        arr = tensors.get(f"field.{k}")
        if arr is None or tuple(arr.shape) != tuple(ref.shape):
            raise SceneFormatError(path, f"파라미터 누락 또는 shape 불일치: {k}")
        state_dict[k] = torch.from_numpy(arr.astype(np.float32))
    field.load_state_dict(state_dict)
    return Checkpoint(field=field, step=int(meta.get("step", 0)), meta=meta, tensors=tensors)
