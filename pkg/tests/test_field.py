"""SDF 필드, 공간 그래디언트, 색상 헤드, Adam 갱신, 체크포인트"""
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from torch.func import functional_call

from src.field import (AnalyticField, FieldConfig, ImplicitField, OptimizerState, apply_gradients, eval_color,
                       eval_gradient, eval_sdf, load_checkpoint, save_checkpoint)
from src.losses import DepthPrior, LossComponents, depth_loss, feature_consistency_loss, total_loss
from src.rendering import compute_weights, render, render_feature_similarity, sdf_to_alpha, to_sections
from src.utils import NonFiniteGradientError, SceneFormatError

from conftest import tiny_field_config


def _double_field(seed: int = 0) -> ImplicitField:
    torch.manual_seed(seed)
    return ImplicitField(tiny_field_config()).double()


class TestGeometricInit:
    def test_sphere_sign_convention(self):
        torch.manual_seed(0)
        field = ImplicitField()
        inside = eval_sdf(field, torch.zeros(1, 3))
        outside = eval_sdf(field, torch.tensor([[2 * 0.6, 0.0, 0.0]]))
        assert float(inside) < 0
        assert float(outside) > 0

    def test_skip_layer_must_fit(self):
        with pytest.raises(ValueError):
            ImplicitField(FieldConfig(hidden_layers=2, hidden_dim=16, skip_layers=(2,)))

    def test_deterministic(self):
        field = _double_field()
        pts = torch.rand(5, 3, dtype=torch.float64)
        assert torch.equal(eval_sdf(field, pts), eval_sdf(field, pts))

    def test_initial_sharpness(self):
        field = ImplicitField(tiny_field_config())
        assert float(field.s) == pytest.approx(math.exp(10 * 0.3), rel=1e-6)


class TestAnalyticField:
    def test_surface_point_is_zero(self):
        field = AnalyticField.sphere(0.5)
        assert float(eval_sdf(field, torch.tensor([[0.5, 0.0, 0.0]], dtype=torch.float64))) == 0.0

    def test_gradient_of_norm(self):
        field = AnalyticField.sphere(0.5)
        g = eval_gradient(field, torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64))
        np.testing.assert_allclose(g.numpy(), [[1.0, 0.0, 0.0]], atol=1e-12)

    def test_gradient_at_singular_point_is_finite(self):
        field = AnalyticField.sphere(0.5)
        g = eval_gradient(field, torch.zeros(1, 3, dtype=torch.float64))
        assert bool(torch.isfinite(g).all())

    def test_sharpness_is_configurable(self):
        assert float(AnalyticField.sphere(s=200.0).s) == pytest.approx(200.0)


class TestFieldGradient:
    def test_matches_central_differences(self):
        field = _double_field()
        pts = torch.rand(100, 3, dtype=torch.float64) * 2 - 1
        grad = eval_gradient(field, pts)
        h = 1e-6
        numeric = torch.zeros_like(pts)
        with torch.no_grad():
            for k in range(3):
                e = torch.zeros(3, dtype=torch.float64)
                e[k] = h
                numeric[:, k] = (eval_sdf(field, pts + e) - eval_sdf(field, pts - e)) / (2 * h)
        rel = (grad - numeric).norm(dim=-1) / numeric.norm(dim=-1).clamp(min=1e-8)
        assert float(rel.max()) < 1e-3

    def test_gradcheck_against_points(self):
        field = _double_field()
        pts = (torch.rand(6, 3, dtype=torch.float64) - 0.5).requires_grad_(True)
        assert torch.autograd.gradcheck(lambda x: eval_sdf(field, x), (pts,), eps=1e-6, atol=1e-5)

    def test_gradcheck_eikonal_against_parameters(self):
        """Eikonal 항의 파라미터 그래디언트 (2차 미분 경로)"""
        field = _double_field()
        pts = torch.rand(8, 3, dtype=torch.float64) - 0.5
        name = "sdf_layers.1.weight"
        params = {k: v.detach() for k, v in field.named_parameters()}

        def eik(weight):
            p = dict(params)
            p[name] = weight
            x = pts.clone().requires_grad_(True)
            sdf, _ = _forward_sdf(field, p, x)
            (g,) = torch.autograd.grad(sdf.sum(), x, create_graph=True)
            return ((g.norm(dim=-1) - 1.0) ** 2).mean()

        w = params[name].clone().requires_grad_(True)
        assert torch.autograd.gradcheck(eik, (w,), eps=1e-6, atol=1e-5)


class _SdfModule(nn.Module):
    """functional_call용 forward = forward_sdf"""

    def __init__(self, inner: ImplicitField):
        super().__init__()
        self.inner = inner

    def forward(self, pts):
        return self.inner.forward_sdf(pts)


def _forward_sdf(field: ImplicitField, params, x):
    return functional_call(_SdfModule(field), {f"inner.{k}": v for k, v in params.items()}, (x,))


class TestColor:
    def test_range(self):
        field = _double_field()
        n = 64
        pts = torch.randn(n, 3, dtype=torch.float64) * 10
        dirs = torch.nn.functional.normalize(torch.randn(n, 3, dtype=torch.float64), dim=-1)
        normals = torch.randn(n, 3, dtype=torch.float64) * 10
        feats = torch.randn(n, 8, dtype=torch.float64) * 100
        c = eval_color(field, pts, dirs, normals, feats)
        assert c.shape == (n, 3)
        assert float(c.min()) >= 0.0 and float(c.max()) <= 1.0

    def test_deterministic(self):
        field = _double_field()
        pts = torch.rand(4, 3, dtype=torch.float64)
        out1 = field.evaluate(pts, torch.nn.functional.normalize(pts, dim=-1))
        out2 = field.evaluate(pts, torch.nn.functional.normalize(pts, dim=-1))
        assert torch.equal(out1.color, out2.color)

    def test_gradcheck_against_parameters(self):
        field = _double_field()
        n = 5
        gen = torch.Generator().manual_seed(1)
        pts = torch.rand(n, 3, dtype=torch.float64, generator=gen) - 0.5
        dirs = torch.nn.functional.normalize(torch.randn(n, 3, dtype=torch.float64, generator=gen), dim=-1)
        normals = torch.randn(n, 3, dtype=torch.float64, generator=gen)
        feats = torch.randn(n, 8, dtype=torch.float64, generator=gen)
        name = "color_layers.0.weight"
        params = {k: v.detach() for k, v in field.named_parameters()}

        def color(weight):
            p = dict(params)
            p[name] = weight
            return functional_call(_ColorModule(field), {f"inner.{k}": v for k, v in p.items()},
                                   (pts, dirs, normals, feats))

        w = params[name].clone().requires_grad_(True)
        assert torch.autograd.gradcheck(color, (w,), eps=1e-6, atol=1e-5)


class _ColorModule(nn.Module):
    """functional_call용 forward = color"""

    def __init__(self, inner: ImplicitField):
        super().__init__()
        self.inner = inner

    def forward(self, pts, dirs, normals, feats):
        return eval_color(self.inner, pts, dirs, normals, feats)


class TestLossGradientsThroughField:
    """SDF -> α -> w -> (특징, 깊이, 총합) 손실의 파라미터 그래디언트"""

    def _setup(self):
        field = _double_field()
        gen = torch.Generator().manual_seed(2)
        r, n = 4, 16
        origins = torch.tensor([[0.0, 0.0, 2.0]], dtype=torch.float64).expand(r, 3)
        dirs = torch.nn.functional.normalize(
            torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64) + 0.1 * torch.randn(r, 3, dtype=torch.float64,
                                                                               generator=gen), dim=-1)
        dist = torch.linspace(1.0, 3.0, n, dtype=torch.float64).expand(r, n)
        points = origins[:, None, :] + dirs[:, None, :] * dist[..., None]
        sims = torch.rand(r, 2, n - 1, dtype=torch.float64, generator=gen) * 2 - 1
        return field, points, dist, sims

    def _losses(self, field, params, points, dist, sims, weight_name, weight):
        p = dict(params)
        p[weight_name] = weight
        sdf, _ = _forward_sdf(field, p, points)
        w = compute_weights(sdf_to_alpha(sdf, float(field.s)))
        res = render(None, w, torch.zeros(*w.shape, 3, dtype=w.dtype), to_sections(dist))
        res.feature_similarity = render_feature_similarity(w, sims)
        masks = torch.tensor([[True, True], [True, False], [False, True], [True, True]])
        feat = feature_consistency_loss(res, masks, "accumulate")
        literal = feature_consistency_loss(res, masks, "paper_literal")
        prior = DepthPrior(np.zeros((1, 1)), a=1.1, b=0.05)
        d_hat = torch.linspace(1.2, 1.6, len(dist), dtype=torch.float64)
        unc = torch.tensor([0.2, 0.7, 0.0, 1.0], dtype=torch.float64)
        depth = depth_loss(res.rendered_depth, prior, unc, prior_values=d_hat)
        return feat, literal, depth, total_loss(LossComponents(feat=feat, depth=depth), alpha=0.5)

    def test_gradcheck(self):
        field, points, dist, sims = self._setup()
        name = "sdf_layers.1.bias"
        params = {k: v.detach() for k, v in field.named_parameters()}
        b = params[name].clone().requires_grad_(True)
        assert torch.autograd.gradcheck(lambda x: self._losses(field, params, points, dist, sims, name, x),
                                        (b,), eps=1e-6, atol=1e-5, rtol=1e-3)

    def test_central_differences_on_weight_matrix(self):
        field, points, dist, sims = self._setup()
        name = "sdf_layers.1.weight"
        params = {k: v.detach() for k, v in field.named_parameters()}
        w0 = params[name].clone().requires_grad_(True)
        total = self._losses(field, params, points, dist, sims, name, w0)[-1]
        (grad,) = torch.autograd.grad(total, w0)

        gen = torch.Generator().manual_seed(3)
        idx = torch.randperm(w0.numel(), generator=gen)[:40]
        h = 1e-6
        with torch.no_grad():
            for i in idx.tolist():
                e = torch.zeros_like(w0).view(-1)
                e[i] = h
                e = e.view_as(w0)
                plus = float(self._losses(field, params, points, dist, sims, name, w0 + e)[-1])
                minus = float(self._losses(field, params, points, dist, sims, name, w0 - e)[-1])
                numeric = (plus - minus) / (2 * h)
                analytic = float(grad.view(-1)[i])
                assert analytic == pytest.approx(numeric, rel=1e-3, abs=1e-5)


class TestApplyGradients:
    def test_zero_gradients_leave_parameters(self):
        field = _double_field()
        before = [p.detach().clone() for p in field.parameters()]
        state = OptimizerState(field.parameters(), total_steps=10)
        apply_gradients(field, [torch.zeros_like(p) for p in field.parameters()], state)
        assert state.step == 1
        for b, p in zip(before, field.parameters()):
            assert torch.equal(b, p.detach())

    def test_descent_direction(self):
        theta = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        holder = nn.Module()
        holder.theta = theta
        state = OptimizerState([theta], total_steps=10, lr=0.1, warmup_fraction=0.0)
        apply_gradients(holder, [2 * theta.detach()], state)
        assert abs(float(theta)) < 1.0

    def test_least_squares_toy_converges(self):
        rng = np.random.default_rng(0)
        X = torch.as_tensor(rng.normal(size=(64, 3)))
        w_true = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        y = X @ w_true
        w = nn.Parameter(torch.zeros(3, dtype=torch.float64))
        holder = nn.Module()
        holder.w = w
        state = OptimizerState([w], total_steps=200, lr=0.05, warmup_fraction=0.05)
        losses = []
        for _ in range(200):
            loss = ((X @ w - y) ** 2).mean()
            losses.append(float(loss))
            (g,) = torch.autograd.grad(loss, [w])
            apply_gradients(holder, [g], state)
        assert losses[-1] < 0.01 * losses[0]
        assert losses[100] < losses[state.warmup_steps]

    def test_nan_gradient_names_term(self):
        field = _double_field()
        params = list(field.parameters())
        state = OptimizerState(params, total_steps=10)
        bad = [torch.full_like(p, float("nan")) for p in params]
        good = [torch.zeros_like(p) for p in params]
        with pytest.raises(NonFiniteGradientError) as exc:
            apply_gradients(field, bad, state, {"eik": lambda: good, "feat": lambda: bad})
        assert exc.value.term == "feat"
        assert state.step == 0

    def test_shape_mismatch_raises(self):
        field = _double_field()
        params = list(field.parameters())
        state = OptimizerState(params, total_steps=10)
        grads = [torch.zeros(1, dtype=torch.float64)] * len(params)
        with pytest.raises(ValueError):
            apply_gradients(field, grads, state)

    def test_schedule_warmup_and_floor(self):
        state = OptimizerState([nn.Parameter(torch.zeros(1))], total_steps=100, lr=1.0, warmup_fraction=0.1)
        assert state.learning_rate(0) == pytest.approx(0.1)
        assert state.learning_rate(9) == pytest.approx(1.0)
        assert state.learning_rate(100) == pytest.approx(0.05)


class TestCheckpoint:
    def test_round_trip_restores_parameters_and_moments(self, tmp_path):
        torch.manual_seed(0)
        field = ImplicitField(tiny_field_config())
        state = OptimizerState(field.parameters(), total_steps=10)
        pts = torch.rand(16, 3)
        loss = eval_sdf(field, pts).pow(2).mean()
        grads = torch.autograd.grad(loss, state.params, allow_unused=True)
        apply_gradients(field, grads, state)

        path = tmp_path / "checkpoint.bin"
        save_checkpoint(path, field, state, {"note": "t"})
        ckpt = load_checkpoint(path)
        assert ckpt.step == 1
        assert ckpt.meta["note"] == "t"
        for (k, a), (_, b) in zip(field.state_dict().items(), ckpt.field.state_dict().items()):
            assert torch.equal(a, b), k

        restored = OptimizerState(ckpt.field.parameters(), total_steps=10)
        ckpt.restore_optimizer(restored)
        assert restored.step == 1
        for p_old, p_new in zip(state.params, restored.params):
            old = state.optimizer.state[p_old]
            new = restored.optimizer.state[p_new]
            assert torch.equal(old["exp_avg"], new["exp_avg"])
            assert torch.equal(old["exp_avg_sq"], new["exp_avg_sq"])

    def test_truncated_file_reports_offset(self, tmp_path):
        field = ImplicitField(tiny_field_config())
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(path, field)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(SceneFormatError) as exc:
            load_checkpoint(path)
        assert exc.value.offset == len(data) // 2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "checkpoint.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(SceneFormatError):
            load_checkpoint(path)
