import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from marecg.config import n_patches
from marecg.model import (ARDecoder, Attention, Encoder, PatchTokenizer, RhythmPool, apply_mask,
                          attention_cost_ratio, lead_mean, mask_count, reconstruction_losses, sample_mask,
                          latent_dropout)
from marecg.numerics import grad_check


@pytest.mark.parametrize("L,T", [(3500, 139), (4700, 187)])
def test_patch_count(L, T):
    assert n_patches(L, 50, 25) == T


def test_patchify_layout():
    tok = PatchTokenizer(2, 3, patch_len=4, stride=2, dim=8)
    x = torch.arange(16.0).view(2, 8)[None]
    p = tok.patchify(x)
    assert p.shape == (1, 2, 3, 4)
    assert torch.equal(p[0, 1, 2], torch.tensor([12.0, 13.0, 14.0, 15.0]))


def test_zero_signal_zero_embeddings():
    tok = PatchTokenizer(2, 3, patch_len=4, stride=2, dim=8)
    with torch.no_grad():
        tok.lead_embed.zero_()
        tok.pos_embed.zero_()
    assert torch.equal(tok(torch.zeros(1, 2, 8)), torch.zeros(1, 2, 3, 8))


def test_wrong_length_rejected():
    tok = PatchTokenizer(2, 3, patch_len=4, stride=2, dim=8)
    with pytest.raises(ValueError):
        tok(torch.zeros(1, 2, 10))


def test_attention_rows_sum_to_one():
    torch.manual_seed(0)
    enc = Encoder(dim=4, depth=1, n_heads=2)
    for m in enc.modules():
        if isinstance(m, Attention):
            m.keep_weights = True
    out = enc(torch.randn(1, 2, 3, 4))
    assert torch.isfinite(out).all()
    for m in enc.modules():
        if isinstance(m, Attention):
            assert torch.allclose(m.last_weights.sum(-1), torch.ones(()), atol=1e-5)


def test_lead_mean_cases():
    v = torch.randn(1, 1, 5, 3)
    assert torch.allclose(lead_mean(v.expand(1, 4, 5, 3)), v[:, 0])
    assert torch.equal(lead_mean(torch.cat([v, -v], dim=1)), torch.zeros(1, 5, 3))
    h = torch.randn(2, 6, 5, 3, dtype=torch.float64)
    oracle = sum(h[:, c] for c in reversed(range(6))) / 6
    assert torch.allclose(lead_mean(h), oracle, atol=1e-6)


class TestRhythmPool:
    def test_attention_branch_zeroed(self):
        pool = RhythmPool(8, n_queries=2, eta=0.1)
        with torch.no_grad():
            pool.aggregate[-1].weight.zero_()
            pool.aggregate[-1].bias.zero_()
        h = torch.randn(3, 2, 5, 8)
        assert torch.allclose(pool(h), 0.1 * h.mean(dim=(1, 2)))

    def test_zero_input(self):
        pool = RhythmPool(8, n_queries=2)
        h = torch.zeros(1, 2, 5, 8)
        pooled = pool.value.bias.expand(2, 8).reshape(1, 16)  # every lead's value is its bias
        assert torch.allclose(pool(h), pool.aggregate(pooled), atol=1e-7)

    def test_gradient(self):
        torch.manual_seed(1)
        pool = RhythmPool(6, n_queries=2).double()
        h = torch.randn(2, 3, 4, 6, dtype=torch.float64)
        params = [p for p in pool.parameters()]
        assert grad_check(lambda: (pool(h) ** 2).sum(), params, max_coords=80).max_rel_error <= 1e-4


class TestMask:
    def test_counts(self):
        assert mask_count(0.5, 12, 139) == 834
        assert mask_count(0.01, 2, 3) == 1

    def test_deterministic(self):
        assert torch.equal(sample_mask(12, 139, 0.5, 7).sites, sample_mask(12, 139, 0.5, 7).sites)
        assert not torch.equal(sample_mask(12, 139, 0.5, 7).sites, sample_mask(12, 139, 0.5, 8).sites)

    @settings(max_examples=100)
    @given(st.integers(1, 99), st.integers(1, 12), st.integers(1, 200), st.integers(0, 2**31))
    def test_count_is_exact_ceiling(self, pct, C, T, seed):
        assert sample_mask(C, T, pct / 100, seed).count == -(-pct * C * T // 100)

    def test_horizon_views(self):
        plan = sample_mask(3, 10, 0.3, 0, horizon=2)
        assert plan.hidden[:, -2:].all()
        assert not plan.context_sites[:, -2:].any()
        assert torch.equal(plan.hidden[:, :-2], plan.sites[:, :-2])

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            sample_mask(2, 3, 1.0, 0)

    def test_mask_token_bit_exact(self):
        z = torch.randn(2, 3, 4, 5)
        token = torch.randn(5)
        hidden = sample_mask(3, 4, 0.5, 1).sites
        out = apply_mask(z, hidden, token)
        assert torch.equal(out[:, hidden], token.expand(2, int(hidden.sum()), 5))
        assert torch.equal(out[:, ~hidden], z[:, ~hidden])


class TestDecoder:
    def test_causality(self):
        torch.manual_seed(0)
        dec = ARDecoder(dim=8, depth=2, n_heads=2, patch_len=4, n_patches=6).eval()
        h = torch.randn(1, 2, 6, 8)
        patches = torch.randn(1, 2, 6, 4)
        base = dec(h, patches)
        changed = patches.clone()
        changed[..., 3, :] += 5.0
        out = dec(h, changed)
        # position i sees patches < i only
        assert torch.equal(out[..., :4, :], base[..., :4, :])
        assert not torch.allclose(out[..., 4, :], base[..., 4, :])

    def test_losses_zero_at_truth(self):
        patches = torch.randn(2, 3, 6, 4)
        sites = sample_mask(3, 6, 0.5, 0).sites
        recon, mask = reconstruction_losses(patches, patches, sites, 2)
        assert recon == 0 and mask == 0

    def test_constant_prediction_unit_variance(self):
        g = torch.Generator().manual_seed(0)
        patches = torch.randn(4, 12, 40, 50, generator=g)
        recon, _ = reconstruction_losses(torch.zeros_like(patches), patches, torch.zeros(12, 40, dtype=torch.bool), 10)
        assert recon.item() == pytest.approx(1.0, abs=0.02)

    def test_gradients(self):
        torch.manual_seed(2)
        dec = ARDecoder(dim=4, depth=1, n_heads=2, patch_len=3, n_patches=5, mlp_ratio=2).double()
        h = torch.randn(1, 2, 5, 4, dtype=torch.float64)
        patches = torch.randn(1, 2, 5, 3, dtype=torch.float64)
        sites = sample_mask(2, 5, 0.4, 0).sites
        params = list(dec.parameters())
        for which in (0, 1):
            loss = lambda: reconstruction_losses(dec(h, patches), patches, sites, 2)[which]  # noqa: E731
            assert grad_check(loss, params, max_coords=60).max_rel_error <= 1e-4


def test_cost_ratio():
    assert attention_cost_ratio(12, 139) == pytest.approx(12 * 139 / (139 + 12))
    assert round(attention_cost_ratio(12, 139), 2) == 11.05


def test_latent_dropout_generator_isolated():
    x = torch.ones(1000)
    a = latent_dropout(x, 0.25, torch.Generator().manual_seed(5))
    b = latent_dropout(x, 0.25, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)
    assert set(torch.unique(a).tolist()) <= {0.0, float(torch.tensor(1.0) / 0.75)}
    assert torch.equal(latent_dropout(x, 0.25, None, training=False), x)
