"""Stochastic signal views for the view-contrast head."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

RHYTHM_SAFE = ("amplitude_scale", "gaussian_noise", "baseline_wander", "lead_dropout")
UNCONSTRAINED = RHYTHM_SAFE + ("temporal_crop", "time_dilation")
POLICIES = {"rhythm_safe": RHYTHM_SAFE, "unconstrained": UNCONSTRAINED}
# transforms that move beats in time
TIMING = frozenset({"temporal_crop", "time_dilation"})


def _u(gen: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=gen, dtype=torch.float64))


def amplitude_scale(x, gen):
    return x * _u(gen, 0.8, 1.25)


def gaussian_noise(x, gen, std: float = 0.05):
    return x + std * torch.randn(x.shape, generator=gen, dtype=torch.float64).to(x.dtype)


def baseline_wander(x, gen, fs: float = 500.0, amplitude: float = 0.1):
    freq, phase = _u(gen, 0.05, 0.5), _u(gen, 0.0, 2 * math.pi)
    t = torch.arange(x.shape[-1], dtype=torch.float64) / fs
    return x + (amplitude * torch.sin(2 * math.pi * freq * t + phase)).to(x.dtype)


def lead_dropout(x, gen, p: float = 0.25):
    drop = torch.rand(x.shape[0], generator=gen, dtype=torch.float64) < p
    if bool(drop.all()):
        drop[int(torch.randint(x.shape[0], (1,), generator=gen))] = False
    return x.masked_fill(drop[:, None], 0.0)


def _resample(x, length):
    return F.interpolate(x[None], size=length, mode="linear", align_corners=True)[0]


def temporal_crop(x, gen):
    L = x.shape[-1]
    n = int(L * _u(gen, 0.7, 0.95))
    start = int(torch.randint(L - n + 1, (1,), generator=gen))
    return _resample(x[:, start:start + n], L)


def time_dilation(x, gen):
    L = x.shape[-1]
    stretched = _resample(x, max(2, int(round(L * _u(gen, 0.9, 1.1)))))
    if stretched.shape[-1] >= L:
        return stretched[:, :L]
    return F.pad(stretched, (0, L - stretched.shape[-1]))


_TRANSFORMS = {
    "amplitude_scale": amplitude_scale, "gaussian_noise": gaussian_noise, "baseline_wander": baseline_wander,
    "lead_dropout": lead_dropout, "temporal_crop": temporal_crop, "time_dilation": time_dilation,
}


def augment(x: torch.Tensor, policy: str, generator: torch.Generator, p_lead: float = 0.25, fs: float = 500.0,
            p_apply: float = 0.5, log: list | None = None) -> torch.Tensor:
    """Augment each (C, L) record of a (B, C, L) batch independently.

    Each transform of the policy fires with probability ``p_apply``; lead
    dropout always fires at rate ``p_lead``. Applied names are appended to ``log``.
    """
    names = POLICIES[policy]
    out = []
    for rec in x:
        applied = []
        for name in names:
            if name == "lead_dropout":
                rec = lead_dropout(rec, generator, p_lead)
            elif float(torch.rand((), generator=generator, dtype=torch.float64)) < p_apply:
                fn = _TRANSFORMS[name]
                rec = fn(rec, generator, fs) if name == "baseline_wander" else fn(rec, generator)
            else:
                continue
            applied.append(name)
        if log is not None:
            log.append((policy, tuple(applied)))
        out.append(rec)
    return torch.stack(out)
