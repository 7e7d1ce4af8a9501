"""Patch tokenizer, factorised encoder, pooling, masking and the causal AR decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def attention_cost_ratio(n_leads: int, n_patches: int) -> float:
    """Full spatiotemporal attention cost over the factorised cost."""
    C, T = n_leads, n_patches
    return (C * C * T * T) / (C * T * T + C * C * T)


class PatchTokenizer(nn.Module):
    """Shared linear patch embedding plus learnable lead and position embeddings."""

    def __init__(self, n_leads: int, n_patches: int, patch_len: int = 50, stride: int = 25, dim: int = 768,
                 init_std: float = 0.02):
        super().__init__()
        self.patch_len, self.stride, self.n_patches = patch_len, stride, n_patches
        self.proj = nn.Linear(patch_len, dim, bias=False)
        self.lead_embed = nn.Parameter(torch.zeros(n_leads, dim))
        self.pos_embed = nn.Parameter(torch.zeros(n_patches, dim))
        nn.init.trunc_normal_(self.proj.weight, std=init_std, a=-2 * init_std, b=2 * init_std)
        nn.init.trunc_normal_(self.lead_embed, std=init_std, a=-2 * init_std, b=2 * init_std)
        nn.init.trunc_normal_(self.pos_embed, std=init_std, a=-2 * init_std, b=2 * init_std)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, L) -> (B, C, T, P_t); patch i covers samples [i*S, i*S + P)."""
        if x.shape[-1] < self.patch_len:
            raise ValueError(f"signal length {x.shape[-1]} shorter than patch length {self.patch_len}")
        patches = x.unfold(-1, self.patch_len, self.stride)
        if patches.shape[-2] != self.n_patches:
            raise ValueError(f"signal yields {patches.shape[-2]} patches, tokenizer expects {self.n_patches}")
        return patches

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.proj(self.patchify(x))
        return z + self.lead_embed[:, None, :] + self.pos_embed[None, :, :]


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim, bias=False)  # a key bias cancels in the softmax
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.keep_weights = False
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None, causal: bool = False) -> torch.Tensor:
        context = x if context is None else context
        *lead, n, d = x.shape
        m = context.shape[-2]
        h = self.n_heads
        q = self.q(x).view(*lead, n, h, d // h).transpose(-2, -3)
        k = self.k(context).view(*lead, m, h, d // h).transpose(-2, -3)
        v = self.v(context).view(*lead, m, h, d // h).transpose(-2, -3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if causal:
            future = torch.ones(n, m, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = scores.softmax(dim=-1)
        if self.keep_weights:
            self.last_weights = weights.detach()
        out = (weights @ v).transpose(-2, -3).reshape(*lead, n, d)
        return self.out(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int, out: int | None = None, dropout: float = 0.0):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, out or dim))


class FactorizedBlock(nn.Module):
    """Pre-norm spatial attention over leads, then temporal attention over patches, then MLP."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim)
        self.spatial = Attention(dim, n_heads)
        self.norm_t = nn.LayerNorm(dim)
        self.temporal = Attention(dim, n_heads)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim)

    def spatial_step(self, h: torch.Tensor) -> torch.Tensor:
        x = h.transpose(-2, -3)  # (B, T, C, d)
        return h + self.spatial(self.norm_s(x)).transpose(-2, -3)

    def temporal_step(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.temporal(self.norm_t(h))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = self.temporal_step(self.spatial_step(h))
        return h + self.mlp(self.norm_m(h))


class Encoder(nn.Module):
    """Bidirectional factorised transformer acting on (B, C, T, d) tokens."""

    def __init__(self, dim: int, depth: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(FactorizedBlock(dim, n_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = z
        for k, block in enumerate(self.blocks):
            h = block(h)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activation after encoder block {k}")
        return self.norm(h)


def lead_mean(h: torch.Tensor) -> torch.Tensor:
    """(B, C, T, d) -> (B, T, d)."""
    return h.mean(dim=-3)


class RhythmPool(nn.Module):
    """Query attention over time per lead, softmax over leads, MLP over queries,
    plus a residual lead-time mean scaled by ``eta``."""

    def __init__(self, dim: int, n_queries: int = 4, eta: float = 0.1, init_std: float = 0.02):
        super().__init__()
        self.eta = eta
        self.queries = nn.Parameter(torch.zeros(n_queries, dim))
        nn.init.trunc_normal_(self.queries, std=init_std, a=-2 * init_std, b=2 * init_std)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim)
        self.lead_score = nn.Linear(dim, 1, bias=False)
        self.aggregate = nn.Sequential(nn.Linear(n_queries * dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def attend(self, h: torch.Tensor) -> torch.Tensor:
        d = h.shape[-1]
        scores = torch.einsum("qd,bctd->bcqt", self.queries, self.key(h)) / math.sqrt(d)
        per_lead = torch.einsum("bcqt,bctd->bcqd", scores.softmax(dim=-1), self.value(h))
        lead_w = self.lead_score(per_lead).squeeze(-1).softmax(dim=1)  # softmax over leads
        pooled = torch.einsum("bcq,bcqd->bqd", lead_w, per_lead)
        return self.aggregate(pooled.flatten(1))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.attend(h) + self.eta * h.mean(dim=(1, 2))


# -- masking -----------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    sites: torch.Tensor  # (C, T) bool, the randomly masked lattice sites
    ratio: float
    horizon: int  # trailing prediction window length

    @property
    def count(self) -> int:
        return int(self.sites.sum())

    @property
    def hidden(self) -> torch.Tensor:
        """Sites replaced by the mask token: random sites plus the prediction window."""
        out = self.sites.clone()
        if self.horizon:
            out[:, -self.horizon:] = True
        return out

    @property
    def context_sites(self) -> torch.Tensor:
        """Masked sites outside the prediction window."""
        out = self.sites.clone()
        if self.horizon:
            out[:, -self.horizon:] = False
        return out


def mask_count(ratio: float, n_leads: int, n_patches: int) -> int:
    # guard against float noise pushing an exact product over an integer
    return math.ceil(round(ratio * n_leads * n_patches, 9))


def sample_mask(n_leads: int, n_patches: int, ratio: float, seed: int, horizon: int = 0) -> MaskPlan:
    if not 0 < ratio < 1:
        raise ValueError("mask ratio must lie in (0, 1)")
    if horizon > n_patches:
        raise ValueError(f"prediction horizon {horizon} exceeds {n_patches} patches")
    k = mask_count(ratio, n_leads, n_patches)
    gen = torch.Generator().manual_seed(int(seed))
    chosen = torch.randperm(n_leads * n_patches, generator=gen)[:k]
    sites = torch.zeros(n_leads * n_patches, dtype=torch.bool)
    sites[chosen] = True
    return MaskPlan(sites.view(n_leads, n_patches), ratio, horizon)


def apply_mask(z: torch.Tensor, hidden: torch.Tensor, token: torch.Tensor) -> torch.Tensor:
    """Replace tokens at ``hidden`` (broadcastable to (B, C, T)) with ``token``."""
    return torch.where(hidden[..., None], token.to(z.dtype), z)


# -- causal decoder ------------------------------------------------------------------


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, n_heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, n_heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.self_attn(self.norm_self(x), causal=True)
        x = x + self.cross_attn(self.norm_cross(x), context=context)
        return x + self.mlp(self.norm_mlp(x))


class ARDecoder(nn.Module):
    """Teacher-forced next-patch decoder: position i sees patches < i and the
    full bidirectional encoder output of the same lead."""

    def __init__(self, dim: int, depth: int, n_heads: int, patch_len: int, n_patches: int, mlp_ratio: int = 4,
                 init_std: float = 0.02):
        super().__init__()
        self.embed = nn.Linear(patch_len, dim)
        self.start = nn.Parameter(torch.zeros(dim))
        self.pos_embed = nn.Parameter(torch.zeros(n_patches, dim))
        nn.init.trunc_normal_(self.start, std=init_std, a=-2 * init_std, b=2 * init_std)
        nn.init.trunc_normal_(self.pos_embed, std=init_std, a=-2 * init_std, b=2 * init_std)
        self.blocks = nn.ModuleList(DecoderBlock(dim, n_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, patch_len)

    def inputs(self, patches: torch.Tensor) -> torch.Tensor:
        """Decoder input at position i embeds patch i-1 (start token at i=0)."""
        prev = self.embed(patches[..., :-1, :])
        start = self.start.expand(*prev.shape[:-2], 1, prev.shape[-1])
        return torch.cat([start, prev], dim=-2) + self.pos_embed

    def forward(self, h: torch.Tensor, patches: torch.Tensor, dec_in: torch.Tensor | None = None) -> torch.Tensor:
        x = self.inputs(patches) if dec_in is None else dec_in
        for block in self.blocks:
            x = block(x, h)
        return self.head(self.norm(x))


def reconstruction_losses(pred: torch.Tensor, patches: torch.Tensor, plan_sites: torch.Tensor,
                          horizon: int) -> tuple[torch.Tensor, torch.Tensor]:
    """MSE over the trailing window (all leads) and over masked context sites.

    ``plan_sites`` is (B, C, T) or (C, T) bool of randomly masked sites.
    """
    T = patches.shape[-2]
    if horizon > T:
        raise ValueError(f"prediction horizon {horizon} exceeds {T} patches")
    err = (pred - patches) ** 2
    recon = err[..., T - horizon:, :].mean() if horizon else err.sum() * 0.0
    context = plan_sites.expand(err.shape[:-1]).clone()
    if horizon:
        context[..., T - horizon:] = False
    if context.any():
        mask_loss = err[context].mean()
    else:
        mask_loss = err.sum() * 0.0
    return recon, mask_loss


def decode_and_reconstruct(decoder: ARDecoder, h: torch.Tensor, plan_sites: torch.Tensor, patches: torch.Tensor,
                           horizon: int):
    pred = decoder(h, patches)
    recon, mask_loss = reconstruction_losses(pred, patches, plan_sites, horizon)
    return recon, mask_loss, pred


def latent_dropout(x: torch.Tensor, p: float, generator: torch.Generator | None, training: bool = True):
    """Inverted dropout drawing from an explicit generator."""
    if not training or p <= 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=torch.float64) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


__all__ = [
    "ARDecoder", "Attention", "Encoder", "FactorizedBlock", "MaskPlan", "PatchTokenizer", "RhythmPool",
    "apply_mask", "attention_cost_ratio", "decode_and_reconstruct", "init_weights", "latent_dropout",
    "lead_mean", "mask_count", "reconstruction_losses", "sample_mask",
]
