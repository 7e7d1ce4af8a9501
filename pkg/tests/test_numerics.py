import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from marecg.numerics import (AdamW, GradCheckError, LrSchedule, adamw_update, clip_and_gate, grad_check,
                             global_grad_norm, lr_at)


class TestSchedule:
    def test_published_points(self):
        s = LrSchedule()
        assert lr_at(s, 10) == pytest.approx(1e-4)
        assert lr_at(s, 100) == pytest.approx(1e-6)
        assert lr_at(s, 5) == pytest.approx(5e-5)
        assert lr_at(s, 0) == 0.0

    @given(st.floats(10, 100), st.floats(10, 100))
    def test_monotone_after_warmup(self, a, b):
        s = LrSchedule()
        lo, hi = sorted((a, b))
        assert lr_at(s, lo) >= lr_at(s, hi)

    @given(st.floats(-5, 200))
    def test_bounded(self, e):
        assert 0.0 <= LrSchedule()(e) <= 1e-4


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        p = torch.tensor([1.0])
        adamw_update(p, torch.tensor([1.0]), torch.zeros(1), torch.zeros(1), 1, lr=0.1, weight_decay=0.0)
        assert p.item() == pytest.approx(0.9, abs=1e-6)

    def test_pure_decay(self):
        p = torch.tensor([1.0])
        adamw_update(p, torch.zeros(1), torch.zeros(1), torch.zeros(1), 1, lr=0.1, weight_decay=0.05)
        assert p.item() == pytest.approx(0.995)

    def test_zero_grad_fixed_point(self):
        p = torch.randn(5)
        before = p.clone()
        adamw_update(p, torch.zeros(5), torch.zeros(5), torch.zeros(5), 1, lr=0.1, weight_decay=0.0)
        assert torch.equal(p, before)

    def test_matches_torch_reference(self):
        # torch.optim.AdamW is an independent implementation of the same recurrence
        g = torch.Generator().manual_seed(0)
        init = torch.randn(4, 3, generator=g, dtype=torch.float64)
        ours, ref = init.clone().requires_grad_(), init.clone().requires_grad_()
        opt_a = AdamW([ours], lr=1e-2, weight_decay=0.05)
        opt_b = torch.optim.AdamW([ref], lr=1e-2, weight_decay=0.05)
        for _ in range(20):
            grad = torch.randn(4, 3, generator=g, dtype=torch.float64)
            ours.grad, ref.grad = grad.clone(), grad.clone()
            opt_a.step()
            opt_b.step()
        assert torch.allclose(ours, ref, atol=1e-12)

    def test_nonfinite_step_skipped(self):
        p = torch.ones(3, requires_grad=True)
        opt = AdamW([p], lr=0.1)
        p.grad = torch.tensor([1.0, float("nan"), 0.0])
        assert opt.step() is False
        assert opt.skipped == 1 and torch.equal(p.detach(), torch.ones(3)) and not opt.state

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            AdamW([torch.ones(1, requires_grad=True)], lr=-1.0)


class TestClipping:
    def _params(self, *grads):
        ps = []
        for g in grads:
            p = torch.zeros_like(g, requires_grad=True)
            p.grad = g.clone()
            ps.append(p)
        return ps

    def test_halves_at_norm_two(self):
        ps = self._params(torch.tensor([2.0, 0.0]), torch.tensor([0.0]))
        applied, norm = clip_and_gate(ps, 1.0)
        assert applied and norm == pytest.approx(2.0)
        assert torch.allclose(ps[0].grad, torch.tensor([1.0, 0.0]))

    def test_below_threshold_unchanged(self):
        ps = self._params(torch.tensor([0.3, 0.4]))
        clip_and_gate(ps, 1.0)
        assert torch.equal(ps[0].grad, torch.tensor([0.3, 0.4]))

    def test_nan_gates_step(self):
        ps = self._params(torch.tensor([1.0, float("nan")]))
        applied, norm = clip_and_gate(ps, 1.0)
        assert not applied and math.isnan(norm) and ps[0].grad is None

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12), st.floats(0.1, 10))
    def test_post_clip_norm_bounded(self, values, max_norm):
        ps = self._params(torch.tensor(values, dtype=torch.float64))
        clip_and_gate(ps, max_norm)
        assert float(global_grad_norm(ps)) <= max_norm * (1 + 1e-9)


class TestGradCheck:
    def test_quadratic_exact(self):
        x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
        result = grad_check(lambda: (x ** 2).sum(), [x])
        assert result.max_rel_error < 1e-8 and result.n_checked == 3

    def test_detects_wrong_gradient(self):
        x = torch.tensor([0.5, -1.5], dtype=torch.float64, requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, v):
                return (v ** 3).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(2, dtype=torch.float64)

        assert grad_check(lambda: Wrong.apply(x), [x]).max_rel_error > 0.1

    @pytest.mark.parametrize("eps", [1e-7, 1e-2])
    def test_epsilon_range(self, eps):
        x = torch.ones(1, dtype=torch.float64, requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: x.sum(), [x], epsilon=eps)

    def test_float32_rejected(self):
        x = torch.ones(1, requires_grad=True)
        with pytest.raises(TypeError):
            grad_check(lambda: x.sum(), [x])

    def test_nonfinite_probe_reports_coordinate(self):
        x = torch.tensor([1.0, 0.0005], dtype=torch.float64, requires_grad=True)
        with pytest.raises(GradCheckError) as info:
            grad_check(lambda: torch.log(x).sum(), [x])
        assert info.value.coordinate == (0, 1)

    def test_subsampled_coordinates_deterministic(self):
        x = torch.randn(50, dtype=torch.float64, requires_grad=True)
        a = grad_check(lambda: (x.sin() * x).sum(), [x], max_coords=10, seed=3)
        b = grad_check(lambda: (x.sin() * x).sum(), [x], max_coords=10, seed=3)
        assert a == b and a.n_checked == 10 and a.max_rel_error < 1e-6


def test_global_norm_matches_numpy():
    rng = np.random.default_rng(0)
    arrays = [rng.normal(size=s) for s in ((3,), (2, 4), (5,))]
    ps = []
    for a in arrays:
        p = torch.zeros(a.shape, requires_grad=True)
        p.grad = torch.tensor(a, dtype=torch.float32)
        ps.append(p)
    expected = np.sqrt(sum((a.astype(np.float32).astype(np.float64) ** 2).sum() for a in arrays))
    assert float(global_grad_norm(ps)) == pytest.approx(expected, rel=1e-12)
