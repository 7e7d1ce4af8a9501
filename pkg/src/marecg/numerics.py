"""Optimiser, learning-rate schedule, gradient hygiene and the finite-difference audit.

Tensors and reverse-mode differentiation come from torch; everything here
sits on top of its autograd tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch


# -- learning-rate schedule -------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float = 1e-4
    floor_lr: float = 1e-6
    warmup_epochs: float = 10.0
    total_epochs: float = 100.0

    def __call__(self, epoch: float) -> float:
        return lr_at(self, epoch)


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Linear warmup from zero, then cosine decay to the floor."""
    e = min(max(float(epoch), 0.0), schedule.total_epochs)
    if schedule.warmup_epochs > 0 and e < schedule.warmup_epochs:
        return schedule.peak_lr * e / schedule.warmup_epochs
    span = schedule.total_epochs - schedule.warmup_epochs
    if span <= 0:
        return schedule.peak_lr
    progress = (e - schedule.warmup_epochs) / span
    return schedule.floor_lr + 0.5 * (schedule.peak_lr - schedule.floor_lr) * (1.0 + math.cos(math.pi * progress))


# -- AdamW ---------------------------------------------------------------------------


def adamw_update(param: torch.Tensor, grad: torch.Tensor, exp_avg: torch.Tensor, exp_avg_sq: torch.Tensor,
                 step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.05) -> None:
    """In-place AdamW update for one tensor; ``step`` is the post-increment count."""
    param.mul_(1.0 - lr * weight_decay)
    exp_avg.mul_(beta1).add_(grad, alpha=1.0 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
    m_hat = exp_avg / (1.0 - beta1**step)
    v_hat = exp_avg_sq / (1.0 - beta2**step)
    param.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)


class AdamW(torch.optim.Optimizer):
    """AdamW with decoupled decay applied before the moment update.

    A step whose gradients contain NaN/Inf is skipped and leaves parameters
    and optimiser state untouched; ``skipped`` counts such events.
    """

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))
        self.skipped = 0

    @torch.no_grad()
    def step(self, closure=None):
        grads = [p.grad for g in self.param_groups for p in g["params"] if p.grad is not None]
        if any(not torch.isfinite(gr).all() for gr in grads):
            self.skipped += 1
            return False
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                adamw_update(p, p.grad, state["exp_avg"], state["exp_avg_sq"], state["step"], group["lr"],
                             beta1, beta2, group["eps"], group["weight_decay"])
        return True

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr


# -- gradient hygiene ----------------------------------------------------------------


def global_grad_norm(params: Iterable[torch.Tensor]) -> torch.Tensor:
    grads = [p.grad.detach().double() for p in params if p.grad is not None]
    if not grads:
        return torch.zeros((), dtype=torch.float64)
    return torch.sqrt(sum((g * g).sum() for g in grads))


def clip_and_gate(params: Sequence[torch.Tensor], max_norm: float = 1.0) -> tuple[bool, float]:
    """Clip gradients to a global L2 norm; discard them if any entry is non-finite.

    Returns ``(applied, norm_before_clipping)``.
    """
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if not torch.isfinite(norm):
        for p in params:
            p.grad = None
        return False, float("nan")
    if norm > max_norm:
        scale = max_norm / float(norm)
        for p in params:
            p.grad.mul_(scale)
    return True, float(norm)


# -- finite-difference audit -----------------------------------------------------------


class GradCheckError(FloatingPointError):
    def __init__(self, message: str, coordinate: tuple[int, int]):
        super().__init__(message)
        self.coordinate = coordinate


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    worst: tuple[int, int]
    n_checked: int


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], epsilon: float = 1e-3,
               max_coords: int | None = 256, seed: int = 0) -> GradCheckResult:
    """Compare autograd gradients with fourth-order central differences.

    ``params`` must be float64 leaf tensors read by ``loss_fn``. Error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    params = list(params)
    if any(p.dtype != torch.float64 for p in params):
        raise TypeError("grad_check runs in float64; convert parameters first")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise GradCheckError("non-finite loss at the unperturbed point", (-1, -1))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    coords = [(i, k) for i, p in enumerate(params) for k in range(p.numel())]
    if max_coords is not None and len(coords) > max_coords:
        gen = torch.Generator().manual_seed(seed)
        pick = torch.randperm(len(coords), generator=gen)[:max_coords].tolist()
        coords = [coords[j] for j in sorted(pick)]

    worst, worst_at = 0.0, (-1, -1)
    with torch.no_grad():
        for i, k in coords:
            flat = params[i].view(-1)
            orig = flat[k].item()
            values = []
            for offset in (2, 1, -1, -2):
                flat[k] = orig + offset * epsilon
                v = loss_fn()
                if not torch.isfinite(v):
                    flat[k] = orig
                    raise GradCheckError(f"non-finite loss probing parameter {i}, coordinate {k}", (i, k))
                values.append(v.item())
            flat[k] = orig
            numeric = (-values[0] + 8 * values[1] - 8 * values[2] + values[3]) / (12 * epsilon)
            analytic = grads[i].view(-1)[k].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if err > worst:
                worst, worst_at = err, (i, k)
    return GradCheckResult(worst, worst_at, len(coords))
