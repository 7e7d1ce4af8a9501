"""Float64 finite-difference audits of each loss head on a tiny model."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import torch

from . import objectives as obj
from .config import RunConfig
from .model import decode_and_reconstruct, lead_mean
from .augment import augment
from .numerics import GradCheckResult, grad_check
from .ontology import build_graph
from .physio import phase_targets, rhythm_targets
from .snomed import resolve_codes, soft_target
from .trainer import MarEcg, RecordTargets, collate

HEADS = ("ar", "jepa", "view", "mpct", "gscl", "patch_rhythm", "patch_pos")
TOLERANCE = 1e-4

# modules whose parameters each head's audit perturbs
_HEAD_MODULES = {
    "ar": ("tokenizer", "encoder", "decoder", "mask_token"),
    "jepa": ("tokenizer", "encoder", "jepa_predictor", "mask_token"),
    "view": ("tokenizer", "encoder", "pool", "view_head"),
    "mpct": ("encoder", "pool", "mpct"),
    "gscl": ("encoder", "pool", "gscl", "prototypes"),
    "patch_rhythm": ("encoder", "msps.rhythm"),
    "patch_pos": ("encoder", "msps.position"),
}


def audit_config(**changes) -> RunConfig:
    base = dict(n_leads=3, window=225, dim=16, depth=1, n_heads=2, decoder_depth=1, mlp_ratio=2,
                pool_queries=2, proto_embed_dim=16, concept_dim=8, msps_hidden=16, view_dim=8, text_dim=8,
                micro_batch=3, accumulation=1, pred_horizon=3)
    base.update(changes)
    return RunConfig(**base)


def audit_batch(cfg: RunConfig, seed: int = 0):
    """Random signals with hand-placed beats and a mix of label situations."""
    graph = build_graph()
    rng = np.random.default_rng(seed)
    peak_sets = [np.array([30, 110, 190]), np.array([20, 80, 150, 210]), np.array([50, 120, 200])]
    code_sets = [(54329005,), (164889003, 164909002), (233917008,)]
    records, targets = [], []
    T = cfg.n_patches
    for peaks, codes in zip(peak_sets, code_sets):
        lt = resolve_codes(codes, graph=graph)
        rt = rhythm_targets(peaks, cfg.fs, cfg.brady_bpm, cfg.tachy_bpm, cfg.theta_alt, cfg.nu_alt)
        phase, mask = phase_targets(peaks, rt.mean_rr, T, cfg.patch_len, cfg.patch_stride, cfg.delta_r)
        groups = obj.beat_patch_groups(peaks, rt.mean_rr, T, cfg.patch_len, cfg.patch_stride, cfg.delta_r)
        targets.append(RecordTargets(soft_target(lt, graph.distance, cfg.gscl_sigma).astype(np.float32),
                                     lt.active, rt, phase, mask, groups))
        records.append(SimpleNamespace(signal=rng.standard_normal((cfg.n_leads, cfg.window)).astype(np.float32)))
    seeds = [seed * 10 + b for b in range(len(records))]
    return collate(records, targets, cfg, seeds, graph.n_nodes)


def _head_loss(model: MarEcg, batch, cfg: RunConfig, head: str):
    x = batch.x.double()

    def loss():
        if head == "ar":
            H = model.encode(x, batch.hidden)
            recon, mask_l, _ = decode_and_reconstruct(model.decoder, H, batch.sites,
                                                      model.tokenizer.patchify(x), cfg.horizon)
            return recon + mask_l
        if head == "jepa":
            H = model.encode(x, batch.hidden)
            with torch.no_grad():
                target = model.ema_encoder(model.ema_tokenizer(x))
            return obj.jepa_loss(model.jepa_predictor(H[batch.sites]), target[batch.sites])
        if head == "view":
            gen = torch.Generator().manual_seed(cfg.seed)
            xa = augment(x, "unconstrained", gen, cfg.p_lead, cfg.fs)
            xb = augment(x, "unconstrained", gen, cfg.p_lead, cfg.fs)
            return obj.nt_xent(model.view_head(model.features(xa)), model.view_head(model.features(xb)),
                               cfg.view_tau)
        H = model.encode(x, batch.hidden)
        if head == "gscl":
            P = model.prototypes(model.a_hat)
            return model.gscl(model.pool(H), P, batch.soft.double(), batch.gscl_valid)
        if head == "mpct":
            P = model.prototypes(model.a_hat)
            return model.mpct(model.pool(H), lead_mean(H), batch.actives, batch.beat_groups, P)[0]
        hbar = lead_mean(H)
        if head == "patch_rhythm":
            return obj.patch_rhythm_loss(model.msps.rhythm(hbar), batch.rhythm)[0]
        if head == "patch_pos":
            return obj.patch_pos_loss(model.msps.position(hbar), batch.seq, batch.phase, batch.phase_mask,
                                      cfg.seq_buckets)[0]
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")

    return loss


def head_parameters(model: MarEcg, head: str) -> list[torch.nn.Parameter]:
    params = []
    for name in _HEAD_MODULES[head]:
        target = model.get_submodule(name) if name != "mask_token" else None
        params += [model.mask_token] if target is None else list(target.parameters())
    return [p for p in params if p.requires_grad]


def audit_head(head: str, seed: int = 0, max_coords: int = 96, epsilon: float = 1e-3) -> GradCheckResult:
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    cfg = audit_config(seed=seed)
    torch.manual_seed(seed)
    model = MarEcg(cfg).double().eval()
    batch = audit_batch(cfg, seed)
    return grad_check(_head_loss(model, batch, cfg, head), head_parameters(model, head), epsilon=epsilon,
                      max_coords=max_coords, seed=seed)
