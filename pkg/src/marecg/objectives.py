"""Supervision heads: graph-smoothed contrast, physiological patch heads, the
auxiliary self-supervised stack, and the gated total loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import canonical_ablation
from .model import Mlp

logger = logging.getLogger(__name__)

# -- prototypes and GSCL -------------------------------------------------------------


class PrototypeNet(nn.Module):
    """Two-layer GCN over the fixed normalised adjacency producing unit-norm prototypes."""

    def __init__(self, n_nodes: int = 40, embed_dim: int = 192, concept_dim: int = 48, dropout: float = 0.1,
                 init_std: float = 0.02, eps: float = 1e-12):
        super().__init__()
        self.embed = nn.Parameter(torch.randn(n_nodes, embed_dim) * init_std)
        self.w1 = nn.Linear(embed_dim, embed_dim, bias=False)
        self.w2 = nn.Linear(embed_dim, concept_dim, bias=False)
        self.norm1 = nn.LayerNorm(embed_dim, bias=False)
        self.norm2 = nn.LayerNorm(concept_dim, bias=False)
        self.dropout = dropout
        self.eps = eps
        self.zero_norm_rows = 0

    def forward(self, a_hat: torch.Tensor, generator: torch.Generator | None = None,
                dropout: bool | None = None) -> torch.Tensor:
        """``dropout`` overrides the training-mode switch when given."""
        E = self.embed
        h1 = self.norm1(F.gelu(self.w1(E + a_hat @ E)))
        if (self.training if dropout is None else dropout) and self.dropout > 0:
            keep = torch.rand(h1.shape, generator=generator, dtype=torch.float64) >= self.dropout
            h1 = h1 * keep.to(h1.dtype) / (1.0 - self.dropout)
        h2 = self.norm2(self.w2(h1 + a_hat @ h1))
        norms = h2.norm(dim=1, keepdim=True)
        small = norms < self.eps
        if small.any():
            self.zero_norm_rows += int(small.sum())
            logger.warning("prototype rows with near-zero norm: %d", int(small.sum()))
        return h2 / norms.clamp_min(self.eps)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def unit(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def gscl_loss(h_hat: torch.Tensor, prototypes: torch.Tensor, soft_targets: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-entropy of soft targets against the prototype-similarity softmax.

    ``h_hat`` (B, d_c) and ``prototypes`` (N, d_c) are unit-norm rows.
    """
    log_q = torch.log_softmax(h_hat @ prototypes.T / tau, dim=-1)
    return -(soft_targets * log_q).sum(dim=-1).mean()


class GsclHead(nn.Module):
    def __init__(self, dim: int, concept_dim: int, tau: float = 0.1):
        super().__init__()
        self.proj = nn.Linear(dim, concept_dim, bias=False)
        self.tau = tau
        self.skipped_batches = 0

    def forward(self, h: torch.Tensor, prototypes: torch.Tensor, soft_targets: torch.Tensor,
                valid: torch.Tensor) -> torch.Tensor:
        if not bool(valid.any()):
            self.skipped_batches += 1
            return h.sum() * 0.0
        return gscl_loss(unit(self.proj(h[valid])), prototypes, soft_targets[valid], self.tau)


# -- MSPS --------------------------------------------------------------------------

N_RATE = 4
N_PHASE = 4


@dataclass
class RhythmBatch:
    """Per-record rhythm targets as tensors (invalid entries are ignored)."""

    alternation: torch.Tensor  # (B,) float 0/1
    alt_valid: torch.Tensor  # (B,) bool
    rate: torch.Tensor  # (B,) long in [0, 4)
    rate_valid: torch.Tensor  # (B,) bool, False for the 'none' bucket
    mean_rr: torch.Tensor  # (B,) float
    rr_cv: torch.Tensor  # (B,) float
    rr_valid: torch.Tensor  # (B,) bool


def batch_zscore(values: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Z-score over the batch with a floored population std (single record -> 0)."""
    mu = values.mean()
    sd = values.std(unbiased=False) if values.numel() > 1 else torch.zeros((), dtype=values.dtype)
    return (values - mu) / sd.clamp_min(eps)


def patch_rhythm_loss(logits: torch.Tensor, targets: RhythmBatch, alphas=(1.0, 1.0, 0.5, 0.5)):
    """Rhythm statistics broadcast to every patch; returns (loss, sub-terms).

    ``logits`` is (B, T, 7): alternation, 4 rate logits, mean-RR, RR-CV.
    """
    zero = logits.sum() * 0.0
    T = logits.shape[1]
    alt_logit, rate_logit = logits[..., 0], logits[..., 1:1 + N_RATE]
    mrr_pred, cv_pred = logits[..., 1 + N_RATE], logits[..., 2 + N_RATE]
    terms = {}
    if targets.alt_valid.any():
        v = targets.alt_valid
        terms["alt"] = F.binary_cross_entropy_with_logits(
            alt_logit[v], targets.alternation[v].to(logits.dtype)[:, None].expand(-1, T))
    else:
        terms["alt"] = zero
    if targets.rate_valid.any():
        v = targets.rate_valid
        terms["rate"] = F.cross_entropy(rate_logit[v].reshape(-1, N_RATE),
                                        targets.rate[v][:, None].expand(-1, T).reshape(-1))
    else:
        terms["rate"] = zero
    if targets.rr_valid.any():
        v = targets.rr_valid
        z_rr = batch_zscore(targets.mean_rr[v].to(logits.dtype))
        z_cv = batch_zscore(targets.rr_cv[v].to(logits.dtype))
        terms["mrr"] = ((mrr_pred[v] - z_rr[:, None]) ** 2).mean()
        terms["cv"] = ((cv_pred[v] - z_cv[:, None]) ** 2).mean()
    else:
        terms["mrr"] = terms["cv"] = zero
    a_alt, a_rate, a_mrr, a_cv = alphas
    total = a_alt * terms["alt"] + a_rate * terms["rate"] + a_mrr * terms["mrr"] + a_cv * terms["cv"]
    return total, terms


def patch_pos_loss(logits: torch.Tensor, seq_bucket: torch.Tensor, phase: torch.Tensor, phase_mask: torch.Tensor,
                   n_buckets: int = 8):
    """Sequence-position CE plus R-phase CE on unmasked patches, unit weights."""
    B, T, _ = logits.shape
    seq_logit, phase_logit = logits[..., :n_buckets], logits[..., n_buckets:n_buckets + N_PHASE]
    seq = seq_bucket.expand(B, T) if seq_bucket.dim() == 1 else seq_bucket
    terms = {"seq": F.cross_entropy(seq_logit.reshape(-1, n_buckets), seq.reshape(-1))}
    if phase_mask.any():
        terms["phase"] = F.cross_entropy(phase_logit[phase_mask], phase[phase_mask])
    else:
        terms["phase"] = logits.sum() * 0.0
    return terms["seq"] + terms["phase"], terms


def msps_ramp(epoch: float, ramp_epochs: float = 5.0) -> float:
    if ramp_epochs <= 0:
        return 1.0
    return min(1.0, max(0.0, epoch) / ramp_epochs)


def msps_loss(rhythm_loss: torch.Tensor, pos_loss: torch.Tensor, epoch: float, lambda_rhythm: float = 0.20,
              lambda_pos: float = 0.10, ramp_epochs: float = 5.0) -> torch.Tensor:
    return msps_ramp(epoch, ramp_epochs) * (lambda_rhythm * rhythm_loss + lambda_pos * pos_loss)


class MspsHeads(nn.Module):
    def __init__(self, dim: int, hidden: int = 256, dropout: float = 0.1, n_buckets: int = 8):
        super().__init__()
        self.rhythm = Mlp(dim, hidden, 3 + N_RATE, dropout)
        self.position = Mlp(dim, hidden, n_buckets + N_PHASE, dropout)
        self.n_buckets = n_buckets


# -- JEPA and view contrast ---------------------------------------------------------------


def jepa_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE between predicted and stop-gradient target latents at masked sites."""
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return ((pred - target.detach()) ** 2).mean()


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, momentum: float = 0.996) -> None:
    for t, o in zip(target.parameters(), online.parameters()):
        t.mul_(momentum).add_(o.detach(), alpha=1.0 - momentum)


def nt_xent(z1: torch.Tensor, z2: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """NT-Xent over 2B views; each anchor has one positive and 2B-2 negatives."""
    B = z1.shape[0]
    if B < 2:
        raise ValueError("view contrast needs at least two records per batch")
    z = unit(torch.cat([z1, z2], dim=0))
    sim = z @ z.T / tau
    sim = sim.masked_fill(torch.eye(2 * B, dtype=torch.bool), float("-inf"))
    labels = torch.cat([torch.arange(B, 2 * B), torch.arange(0, B)])
    return F.cross_entropy(sim, labels)


# -- MPCT -----------------------------------------------------------------------------------


def variant_table(n_nodes: int, n_variants: int, text_dim: int, seed: int = 1729) -> torch.Tensor:
    """Deterministic unit-norm stand-in embeddings, one seeded draw per (node, variant)."""
    rows = []
    for c in range(n_nodes):
        for v in range(n_variants):
            gen = torch.Generator().manual_seed(seed * 100_003 + c * n_variants + v)
            rows.append(torch.randn(text_dim, generator=gen, dtype=torch.float64))
    table = torch.stack(rows).view(n_nodes, n_variants, text_dim)
    return (table / table.norm(dim=-1, keepdim=True)).float()


def beat_patch_groups(peaks, mean_rr: float, n_patches: int, patch_len: int = 50, stride: int = 25,
                      delta_r: float = 50.0) -> list[list[int]]:
    """Patch indices whose window overlaps [peak - delta_r, peak + RR/2) for each beat."""
    if not np.isfinite(mean_rr) or len(peaks) == 0:
        return []
    starts = np.arange(n_patches) * stride
    groups = []
    for p in peaks:
        lo, hi = p - delta_r, p + mean_rr / 2.0
        idx = np.flatnonzero((starts < hi) & (starts + patch_len > lo))
        if idx.size:
            groups.append(idx.tolist())
    return groups


def _info_nce_bidirectional(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    logits = a @ b.T / tau
    labels = torch.arange(a.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def _cross_summary(query: torch.Tensor, keys: torch.Tensor, tau: float) -> torch.Tensor:
    """Attention summary of unit ``keys`` for each unit ``query`` row, renormalised."""
    return unit(torch.softmax(query @ keys.T / tau, dim=-1) @ keys)


class MpctHead(nn.Module):
    """Instance-, beat- and prototype-level alignment against per-concept variant embeddings."""

    def __init__(self, dim: int, concept_dim: int, text_dim: int = 384, n_nodes: int = 40, n_variants: int = 3,
                 tau: float = 0.1, betas=(0.3, 0.3, 0.2), seed: int = 1729):
        super().__init__()
        self.register_buffer("variants", variant_table(n_nodes, n_variants, text_dim, seed))
        self.text_proj = nn.Linear(text_dim, concept_dim)
        self.ecg_proj = nn.Linear(dim, concept_dim, bias=False)
        self.beat_proj = nn.Linear(dim, concept_dim, bias=False)
        self.tau = tau
        self.betas = betas

    def concept_tokens(self, active: Sequence[int]) -> torch.Tensor:
        return unit(self.text_proj(self.variants[list(active)].reshape(-1, self.variants.shape[-1])))

    def ica(self, h_hat: torch.Tensor, actives: Sequence[Sequence[int]]) -> torch.Tensor:
        summaries = torch.stack([_cross_summary(h_hat[b:b + 1], self.concept_tokens(a), self.tau)[0]
                                 for b, a in enumerate(actives)])
        return _info_nce_bidirectional(h_hat, summaries, self.tau)

    def bca_record(self, beats: torch.Tensor, active: Sequence[int]) -> torch.Tensor:
        f = unit(self.beat_proj(beats))
        u = self.concept_tokens(active)
        beat_to_text = _cross_summary(f, u, self.tau)
        text_to_beat = _cross_summary(u, f, self.tau)
        labels_f = torch.arange(f.shape[0])
        labels_u = torch.arange(u.shape[0])
        return 0.5 * (F.cross_entropy(f @ beat_to_text.T / self.tau, labels_f)
                      + F.cross_entropy(u @ text_to_beat.T / self.tau, labels_u))

    def opa(self, h_hat: torch.Tensor, prototypes: torch.Tensor, actives: Sequence[Sequence[int]]) -> torch.Tensor:
        """KL(uniform over active leaves || softmax assignment over frozen prototypes)."""
        log_a = torch.log_softmax(h_hat @ prototypes.detach().T / self.tau, dim=-1)
        per_record = []
        for b, active in enumerate(actives):
            u = 1.0 / len(active)
            per_record.append((u * (math.log(u) - log_a[b, list(active)])).sum())
        return torch.stack(per_record).mean()

    def forward(self, h: torch.Tensor, hbar: torch.Tensor, actives: Sequence[Sequence[int]],
                beat_groups: Sequence[Sequence[Sequence[int]]], prototypes: torch.Tensor):
        """Returns (loss, sub-terms) over records with a non-empty active set."""
        keep = [b for b, a in enumerate(actives) if len(a)]
        zero = h.sum() * 0.0
        if not keep:
            return zero, {"ica": zero, "bca": zero, "opa": zero}
        acts = [list(actives[b]) for b in keep]
        h_hat = unit(self.ecg_proj(h[keep]))
        terms = {"ica": self.ica(h_hat, acts)}
        bca = [self.bca_record(torch.stack([hbar[b, g].mean(0) for g in beat_groups[b]]), actives[b])
               for b in keep if beat_groups[b]]
        terms["bca"] = torch.stack(bca).mean() if bca else zero
        terms["opa"] = self.opa(h_hat, prototypes, acts)
        b_ica, b_bca, b_opa = self.betas
        return b_ica * terms["ica"] + b_bca * terms["bca"] + b_opa * terms["opa"], terms


# -- total loss and ablation gating ------------------------------------------------------------

TERMS = ("ar", "jepa", "view", "gscl", "msps", "mpct")
GATES: dict[str, frozenset[str]] = {
    "C1": frozenset({"ar"}),
    "C2p": frozenset({"ar", "jepa", "view", "mpct"}),
    "C2": frozenset({"ar", "jepa", "view", "mpct", "gscl"}),
    "C3": frozenset({"ar", "jepa", "view", "mpct", "gscl", "msps"}),
}
AUGMENTATION_POLICY = {"C1": None, "C2p": "unconstrained", "C2": "unconstrained", "C3": "rhythm_safe"}
# sub-terms reported alongside each top-level term
SUBTERMS = {"ar": ("recon", "mask"), "msps": ("patch_rhythm", "patch_pos"), "mpct": ("ica", "bca", "opa")}


def regularisers_active(ablation: str) -> bool:
    """Lead masking and latent dropout ride with the auxiliary stack."""
    return "jepa" in GATES[canonical_ablation(ablation)]


@dataclass
class LossBundle:
    terms: dict[str, torch.Tensor] = field(default_factory=dict)  # pre-weight values
    weighted: dict[str, float] = field(default_factory=dict)  # post-weight contributions
    counters: dict[str, int] = field(default_factory=dict)

    def bump(self, name: str, k: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + k


def total_loss(bundle: LossBundle, ablation: str, weights: Mapping[str, float]) -> torch.Tensor:
    """Weighted sum of the top-level terms gated by the ablation column.

    ``msps`` is expected already ramped and internally weighted.
    """
    gates = GATES[canonical_ablation(ablation)]
    for name in bundle.terms:
        if name in TERMS and name not in gates:
            bundle.bump("gated_off")
            logger.warning("loss term %r present but gated off under %s", name, ablation)
    total = bundle.terms["ar"]
    bundle.weighted["ar"] = float(total.detach())
    for name in TERMS[1:]:
        if name in gates and name in bundle.terms:
            w = weights.get(name, 1.0)
            contrib = bundle.terms[name] if w == 1.0 else w * bundle.terms[name]
            bundle.weighted[name] = float(contrib.detach())
            total = total + contrib
    return total
