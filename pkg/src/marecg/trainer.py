"""Pretraining loop: composite model, batching, accumulation, EMA, ledger and checkpoints."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import objectives as obj
from .augment import augment
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .config import RunConfig
from .ingest import EcgRecord
from .model import (ARDecoder, Encoder, Mlp, PatchTokenizer, RhythmPool, apply_mask, decode_and_reconstruct,
                    latent_dropout, lead_mean, sample_mask)
from .numerics import AdamW, LrSchedule, clip_and_gate, lr_at
from .ontology import ConceptGraph, build_graph
from .physio import phase_targets, rhythm_targets, seq_position_targets
from .snomed import soft_target

logger = logging.getLogger(__name__)

# ledger columns in emission order; each carries a pre-weight and a post-weight value
LEDGER_TERMS = ("recon", "mask", "ar", "jepa", "view", "gscl", "patch_rhythm", "patch_pos", "msps",
                "ica", "bca", "opa", "mpct")
_TERM_GATE = {"recon": "ar", "mask": "ar", "ar": "ar", "jepa": "jepa", "view": "view", "gscl": "gscl",
              "patch_rhythm": "msps", "patch_pos": "msps", "msps": "msps", "ica": "mpct", "bca": "mpct",
              "opa": "mpct", "mpct": "mpct"}


def ledger_terms(ablation: str) -> tuple[str, ...]:
    gates = obj.GATES[ablation]
    return tuple(t for t in LEDGER_TERMS if _TERM_GATE[t] in gates)


def ledger_columns(ablation: str) -> list[str]:
    cols = ["step", "epoch", "lr", "grad_norm", "applied"]
    if obj.AUGMENTATION_POLICY[ablation]:
        cols.append("augment")
    for t in ledger_terms(ablation):
        cols += [t, f"{t}_w"]
    return cols + ["total"]


def stream_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


_STREAMS = {"mask": 1, "latent": 2, "augment": 3, "proto": 4, "order": 5}


def generator(cfg: RunConfig, step: int, micro: int, stream: str) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(cfg.seed, step, micro, _STREAMS[stream]))


# -- composite model ------------------------------------------------------------------


class MarEcg(nn.Module):
    """Encoder stack plus every head; all heads exist in every ablation so initialisation matches."""

    def __init__(self, cfg: RunConfig, graph: ConceptGraph | None = None):
        super().__init__()
        graph = graph or build_graph()
        d, T = cfg.dim, cfg.n_patches
        self.cfg = cfg
        self.tokenizer = PatchTokenizer(cfg.n_leads, T, cfg.patch_len, cfg.patch_stride, d, cfg.init_std)
        self.mask_token = nn.Parameter(torch.zeros(d))
        nn.init.trunc_normal_(self.mask_token, std=cfg.init_std, a=-2 * cfg.init_std, b=2 * cfg.init_std)
        self.encoder = Encoder(d, cfg.depth, cfg.n_heads, cfg.mlp_ratio)
        self.pool = RhythmPool(d, cfg.pool_queries, cfg.pool_eta, cfg.init_std)
        self.decoder = ARDecoder(d, cfg.decoder_depth, cfg.n_heads, cfg.patch_len, T, cfg.mlp_ratio, cfg.init_std)
        self.jepa_predictor = Mlp(d, 2 * d, d)
        self.view_head = Mlp(d, d, cfg.view_dim)
        self.prototypes = obj.PrototypeNet(graph.n_nodes, cfg.proto_embed_dim, cfg.concept_dim, cfg.proto_dropout)
        self.gscl = obj.GsclHead(d, cfg.concept_dim, cfg.gscl_tau)
        self.msps = obj.MspsHeads(d, cfg.msps_hidden, cfg.msps_dropout, cfg.seq_buckets)
        self.mpct = obj.MpctHead(d, cfg.concept_dim, cfg.text_dim, graph.n_nodes, cfg.n_variants, cfg.mpct_tau,
                                 (cfg.beta_ica, cfg.beta_bca, cfg.beta_opa))
        self.ema_tokenizer = copy.deepcopy(self.tokenizer).requires_grad_(False)
        self.ema_encoder = copy.deepcopy(self.encoder).requires_grad_(False)
        self.register_buffer("a_hat", torch.as_tensor(graph.norm_adjacency, dtype=torch.float32))

    def encode(self, x: torch.Tensor, hidden: torch.Tensor | None = None) -> torch.Tensor:
        z = self.tokenizer(x)
        if hidden is not None:
            z = apply_mask(z, hidden, self.mask_token)
        return self.encoder(z)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Inference path: tokenizer, encoder and pooling only."""
        return self.pool(self.encode(x))

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    @torch.no_grad()
    def update_ema(self, momentum: float) -> None:
        obj.ema_update(self.ema_tokenizer, self.tokenizer, momentum)
        obj.ema_update(self.ema_encoder, self.encoder, momentum)


# -- per-record targets and batches ------------------------------------------------------


@dataclass
class RecordTargets:
    soft: np.ndarray | None  # (N,) or None when the record has no primary positive
    active: tuple[int, ...]
    rhythm: object
    phase: np.ndarray
    phase_mask: np.ndarray
    beat_groups: list[list[int]]


def prepare_targets(record: EcgRecord, cfg: RunConfig, graph: ConceptGraph) -> RecordTargets:
    if record.leaf_target is None or record.rpeaks is None:
        raise ValueError(f"record {record.id} is not preprocessed")
    lt = record.leaf_target
    soft = soft_target(lt, graph.distance, cfg.gscl_sigma).astype(np.float32) if lt.has_primary else None
    rt = rhythm_targets(record.rpeaks, cfg.fs, cfg.brady_bpm, cfg.tachy_bpm, cfg.theta_alt, cfg.nu_alt)
    T = cfg.n_patches
    phase, mask = phase_targets(record.rpeaks, rt.mean_rr, T, cfg.patch_len, cfg.patch_stride, cfg.delta_r)
    groups = obj.beat_patch_groups(record.rpeaks, rt.mean_rr, T, cfg.patch_len, cfg.patch_stride, cfg.delta_r)
    return RecordTargets(soft, lt.active, rt, phase, mask, groups)


@dataclass
class Batch:
    x: torch.Tensor  # (B, C, L)
    soft: torch.Tensor  # (B, N), zero rows where invalid
    gscl_valid: torch.Tensor  # (B,) bool
    actives: list[tuple[int, ...]]
    rhythm: obj.RhythmBatch
    seq: torch.Tensor  # (T,)
    phase: torch.Tensor  # (B, T)
    phase_mask: torch.Tensor  # (B, T)
    beat_groups: list[list[list[int]]]
    sites: torch.Tensor  # (B, C, T) random mask sites
    hidden: torch.Tensor  # (B, C, T) sites plus prediction window

    @property
    def size(self) -> int:
        return self.x.shape[0]


def collate(records: Sequence[EcgRecord], targets: Sequence[RecordTargets], cfg: RunConfig,
            mask_seeds: Sequence[int], n_nodes: int) -> Batch:
    B, T = len(records), cfg.n_patches
    x = torch.from_numpy(np.stack([r.signal for r in records]).astype(np.float32))
    soft = np.zeros((B, n_nodes), dtype=np.float32)
    valid = np.zeros(B, dtype=bool)
    for b, t in enumerate(targets):
        if t.soft is not None:
            soft[b], valid[b] = t.soft, True
    rts = [t.rhythm for t in targets]
    rr_ok = np.array([np.isfinite(rt.mean_rr) for rt in rts])
    rhythm = obj.RhythmBatch(
        alternation=torch.tensor([float(bool(rt.alternation)) for rt in rts]),
        alt_valid=torch.tensor([rt.alternation is not None for rt in rts]),
        rate=torch.tensor([rt.rate_index if rt.valid else 0 for rt in rts], dtype=torch.long),
        rate_valid=torch.tensor([rt.valid for rt in rts]),
        mean_rr=torch.tensor([rt.mean_rr if ok else 0.0 for rt, ok in zip(rts, rr_ok)], dtype=torch.float64),
        rr_cv=torch.tensor([rt.rr_cv if ok else 0.0 for rt, ok in zip(rts, rr_ok)], dtype=torch.float64),
        rr_valid=torch.from_numpy(rr_ok),
    )
    plans = [sample_mask(cfg.n_leads, T, cfg.mask_ratio, s, cfg.horizon) for s in mask_seeds]
    return Batch(
        x=x, soft=torch.from_numpy(soft), gscl_valid=torch.from_numpy(valid),
        actives=[t.active for t in targets], rhythm=rhythm,
        seq=torch.from_numpy(seq_position_targets(T, cfg.seq_buckets)),
        phase=torch.from_numpy(np.stack([np.maximum(t.phase, 0) for t in targets])),
        phase_mask=torch.from_numpy(np.stack([t.phase_mask for t in targets])),
        beat_groups=[t.beat_groups for t in targets],
        sites=torch.stack([p.sites for p in plans]), hidden=torch.stack([p.hidden for p in plans]),
    )


# -- loss computation ------------------------------------------------------------------


def compute_losses(model: MarEcg, batch: Batch, cfg: RunConfig, epoch: float, step: int = 0, micro: int = 0,
                   aug_log: list | None = None) -> tuple[torch.Tensor, obj.LossBundle]:
    """Forward every gated head on one micro-batch; returns (total, bundle)."""
    gates = obj.GATES[cfg.ablation]
    regularise = obj.regularisers_active(cfg.ablation)
    bundle = obj.LossBundle()
    terms = bundle.terms
    sub: dict[str, float] = {}
    x = batch.x
    patches = model.tokenizer.patchify(x)
    H = model.encode(x, batch.hidden)
    recon, mask_l, _ = decode_and_reconstruct(model.decoder, H, batch.sites, patches, cfg.horizon)
    terms["ar"] = cfg.weight_recon * recon + cfg.weight_mask * mask_l
    sub.update(recon=float(recon.detach()), recon_w=cfg.weight_recon * float(recon.detach()),
               mask=float(mask_l.detach()), mask_w=cfg.weight_mask * float(mask_l.detach()))

    if regularise:
        H_aux = latent_dropout(H, cfg.p_latent_drop, generator(cfg, step, micro, "latent"), model.training)
    else:
        H_aux = H
    needs_pool = bool(gates & {"gscl", "mpct"})
    h = model.pool(H_aux) if needs_pool else None

    if "jepa" in gates:
        with torch.no_grad():
            target = model.ema_encoder(model.ema_tokenizer(x))
        sites = batch.sites
        terms["jepa"] = obj.jepa_loss(model.jepa_predictor(H_aux[sites]), target[sites])
    if "view" in gates:
        policy = obj.AUGMENTATION_POLICY[cfg.ablation]
        gen = generator(cfg, step, micro, "augment")
        xa = augment(x, policy, gen, cfg.p_lead, cfg.fs, log=aug_log)
        xb = augment(x, policy, gen, cfg.p_lead, cfg.fs, log=aug_log)
        lat = generator(cfg, step, micro, "latent")
        za = model.view_head(latent_dropout(model.features(xa), cfg.p_latent_drop, lat, model.training))
        zb = model.view_head(latent_dropout(model.features(xb), cfg.p_latent_drop, lat, model.training))
        terms["view"] = obj.nt_xent(za, zb, cfg.view_tau)
    if "gscl" in gates:
        P = model.prototypes(model.a_hat, generator(cfg, step, micro, "proto"))
        before = model.gscl.skipped_batches
        terms["gscl"] = model.gscl(h, P, batch.soft, batch.gscl_valid)
        bundle.bump("gscl_empty", model.gscl.skipped_batches - before)
        bundle.bump("gscl_filtered", int((~batch.gscl_valid).sum()))
    if "msps" in gates:
        hbar = lead_mean(H_aux)
        alphas = (cfg.alpha_alt, cfg.alpha_rate, cfg.alpha_mrr, cfg.alpha_cv)
        l_r, _ = obj.patch_rhythm_loss(model.msps.rhythm(hbar), batch.rhythm, alphas)
        l_p, _ = obj.patch_pos_loss(model.msps.position(hbar), batch.seq, batch.phase, batch.phase_mask,
                                    cfg.seq_buckets)
        ramp = obj.msps_ramp(epoch, cfg.ramp_epochs)
        terms["msps"] = obj.msps_loss(l_r, l_p, epoch, cfg.lambda_rhythm, cfg.lambda_pos, cfg.ramp_epochs)
        sub.update(patch_rhythm=float(l_r.detach()), patch_rhythm_w=ramp * cfg.lambda_rhythm * float(l_r.detach()),
                   patch_pos=float(l_p.detach()), patch_pos_w=ramp * cfg.lambda_pos * float(l_p.detach()))
    if "mpct" in gates:
        with torch.no_grad():
            P_frozen = model.prototypes(model.a_hat, dropout=False)
        hbar = lead_mean(H_aux)
        loss, parts = model.mpct(h, hbar, batch.actives, batch.beat_groups, P_frozen)
        terms["mpct"] = loss
        for name, beta in zip(("ica", "bca", "opa"), (cfg.beta_ica, cfg.beta_bca, cfg.beta_opa)):
            v = float(parts[name].detach())
            sub[name], sub[f"{name}_w"] = v, cfg.lambda_mpct * beta * v

    weights = {"jepa": cfg.lambda_jepa, "view": cfg.lambda_view, "gscl": cfg.lambda_gscl, "msps": 1.0,
               "mpct": cfg.lambda_mpct}
    total = obj.total_loss(bundle, cfg.ablation, weights)
    for name, value in terms.items():
        sub[name] = float(value.detach())
        sub[f"{name}_w"] = bundle.weighted[name]
    bundle.weighted.update(sub)
    return total, bundle


# -- training loop -------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: MarEcg
    config: RunConfig
    ledger: list[dict] = field(default_factory=list)
    columns: list[str] = field(default_factory=list)
    skipped: int = 0
    steps: int = 0
    aug_log: list = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    seconds: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.ledger], dtype=np.float64)


def _stream(n: int, seed: int):
    """Endless record order, one fresh permutation per pass."""
    k = 0
    while True:
        yield from np.random.default_rng(stream_seed(seed, k, _STREAMS["order"])).permutation(n).tolist()
        k += 1


def train(cfg: RunConfig, records: Sequence[EcgRecord], out_dir=None, graph: ConceptGraph | None = None,
          max_steps: int | None = None, progress=None) -> TrainResult:
    """Pretrain on preprocessed ``records``; failed-quality records are dropped first."""
    start = time.perf_counter()
    graph = graph or build_graph()
    usable = [r for r in records if r.quality == "pass"]
    if not usable:
        raise ValueError("corpus is empty after the quality filter")
    targets = [prepare_targets(r, cfg, graph) for r in usable]
    torch.manual_seed(cfg.seed)
    model = MarEcg(cfg, graph)
    model.train()
    params = model.trainable_parameters()
    opt = AdamW(params, lr=0.0, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    schedule = LrSchedule(cfg.peak_lr, cfg.floor_lr, cfg.warmup_epochs, cfg.epochs)
    steps_per_epoch = max(1, math.ceil(len(usable) / cfg.effective_batch))
    n_steps = max_steps or cfg.max_steps or math.ceil(cfg.epochs * steps_per_epoch)
    logger.info("effective batch %d (micro %d x accumulation %d x processes %d)", cfg.effective_batch,
                cfg.micro_batch, cfg.accumulation, cfg.process_count)

    result = TrainResult(model, cfg, columns=ledger_columns(cfg.ablation))
    order = _stream(len(usable), cfg.seed)
    terms = ledger_terms(cfg.ablation)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for step in range(n_steps):
        epoch = step / steps_per_epoch
        sums = {k: 0.0 for t in terms for k in (t, f"{t}_w")}
        total_sum = 0.0
        failed = False
        for micro in range(cfg.accumulation):
            idx = [next(order) for _ in range(cfg.micro_batch)]
            seeds = [stream_seed(cfg.seed, step, micro, _STREAMS["mask"], b) for b in range(len(idx))]
            batch = collate([usable[i] for i in idx], [targets[i] for i in idx], cfg, seeds, graph.n_nodes)
            try:
                total, bundle = compute_losses(model, batch, cfg, epoch, step, micro, result.aug_log)
            except FloatingPointError as exc:
                logger.warning("step %d: %s", step, exc)
                failed = True
                break
            (total / cfg.accumulation).backward()
            total_sum += float(total.detach()) / cfg.accumulation
            for k in sums:
                sums[k] += bundle.weighted[k] / cfg.accumulation
            for k, v in bundle.counters.items():
                result.counters[k] = result.counters.get(k, 0) + v
        lr = lr_at(schedule, epoch)
        applied, norm = (False, float("nan")) if failed else clip_and_gate(params, cfg.max_grad_norm)
        if applied and math.isfinite(total_sum):
            opt.set_lr(lr)
            applied = opt.step()
        else:
            applied = False
        if applied:
            model.update_ema(cfg.ema_momentum)
        else:
            result.skipped += 1
        opt.zero_grad(set_to_none=True)

        row = {"step": step, "epoch": epoch, "lr": lr, "grad_norm": norm, "applied": int(applied)}
        if "augment" in result.columns:
            row["augment"] = obj.AUGMENTATION_POLICY[cfg.ablation]
        row.update(sums)
        row["total"] = total_sum
        result.ledger.append(row)
        result.steps = step + 1
        if progress is not None:
            progress(row)
        if out is not None and ((step + 1) % steps_per_epoch == 0 or step + 1 == n_steps):
            path = out / f"epoch{(step + 1) // steps_per_epoch:04d}_step{step + 1:06d}.ckpt"
            save_model(path, model, cfg, epoch=(step + 1) / steps_per_epoch, step=step + 1,
                       ledger_tail=result.ledger[-5:])
            write_ledger(out / "ledger.csv", result.ledger, result.columns, cfg)
            result.checkpoints.append(path)
    result.seconds = time.perf_counter() - start
    return result


def ablation_matrix(cfg: RunConfig, records: Sequence[EcgRecord], seeds: Sequence[int] = (0,),
                    max_steps: int | None = None) -> dict[tuple[str, int], TrainResult]:
    """One run per (ablation, seed) over a shared corpus."""
    runs = {}
    for seed in seeds:
        for ablation in obj.GATES:
            runs[ablation, seed] = train(cfg.replace(ablation=ablation, seed=seed), records, max_steps=max_steps)
    return runs


# -- ledger and checkpoint I/O -------------------------------------------------------------------


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps_ledger(rows: Sequence[dict], columns: Sequence[str], cfg: RunConfig | None = None) -> str:
    buf = io.StringIO()
    if cfg is not None:
        buf.write(f"# effective_batch={cfg.effective_batch} micro_batch={cfg.micro_batch} "
                  f"accumulation={cfg.accumulation} process_count={cfg.process_count}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def write_ledger(path, rows, columns, cfg: RunConfig | None = None) -> None:
    Path(path).write_text(dumps_ledger(rows, columns, cfg), encoding="utf-8")


def model_tensors(model: MarEcg) -> dict[str, torch.Tensor]:
    return dict(model.state_dict())


def save_model(path, model: MarEcg, cfg: RunConfig, epoch: float = 0.0, step: int = 0,
               ledger_tail: Sequence[dict] = ()) -> None:
    manifest = {
        "format_version": FORMAT_VERSION, "config": cfg.dumps(), "config_hash": cfg.hash(),
        "ablation": cfg.ablation, "seed": cfg.seed, "epoch": epoch, "step": step,
        "ledger_tail": [{k: (v if not isinstance(v, float) or math.isfinite(v) else None) for k, v in r.items()}
                        for r in ledger_tail],
    }
    save_checkpoint(path, manifest, model_tensors(model))


def load_model(path) -> tuple[MarEcg, dict]:
    manifest, tensors = load_checkpoint(path)
    cfg = RunConfig.loads(manifest["config"])
    if cfg.hash() != manifest["config_hash"]:
        raise ValueError("checkpoint config hash does not match its embedded config")
    model = MarEcg(cfg)
    model.load_state_dict(tensors)
    model.eval()
    return model, manifest
