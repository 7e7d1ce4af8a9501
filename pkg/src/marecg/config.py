"""Flat run configuration with a plain ``key = value`` text form."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path

ABLATIONS = ("C1", "C2p", "C2", "C3")
_ABLATION_ALIASES = {"C2'": "C2p", "C2′": "C2p", "C2P": "C2p"}


class ConfigError(ValueError):
    pass


def canonical_ablation(tag: str) -> str:
    tag = _ABLATION_ALIASES.get(tag, tag)
    if tag not in ABLATIONS:
        raise ConfigError(f"unknown ablation {tag!r}; expected one of {ABLATIONS}")
    return tag


@dataclass
class RunConfig:
    # experiment
    ablation: str = "C3"
    seed: int = 0
    # signal and tokenisation
    n_leads: int = 12
    fs: int = 500
    window: int = 4700
    patch_len: int = 50
    patch_stride: int = 25
    # encoder / decoder
    dim: int = 768
    depth: int = 12
    n_heads: int = 12
    mlp_ratio: int = 4
    decoder_depth: int = 4
    init_std: float = 0.02
    mask_ratio: float = 0.5
    pred_horizon: int = 0  # 0 selects ceil(T / 4)
    pool_queries: int = 4
    pool_eta: float = 0.1
    weight_recon: float = 1.0
    weight_mask: float = 1.0
    # GSCL
    proto_embed_dim: int = 192
    concept_dim: int = 48
    proto_dropout: float = 0.1
    gscl_tau: float = 0.1
    gscl_sigma: float = 1.0
    lambda_gscl: float = 1.0
    primary_rule: str = "max_index"
    # MSPS
    msps_hidden: int = 256
    msps_dropout: float = 0.1
    lambda_rhythm: float = 0.20
    lambda_pos: float = 0.10
    alpha_alt: float = 1.0
    alpha_rate: float = 1.0
    alpha_mrr: float = 0.5
    alpha_cv: float = 0.5
    ramp_epochs: float = 5.0
    seq_buckets: int = 8
    delta_r: float = 50.0
    brady_bpm: float = 60.0
    tachy_bpm: float = 100.0
    theta_alt: float = 0.15
    nu_alt: int = 2
    # auxiliary stack
    ema_momentum: float = 0.996
    lambda_jepa: float = 0.15
    view_dim: int = 256
    view_tau: float = 0.07
    lambda_view: float = 0.1
    p_lead: float = 0.25
    p_latent_drop: float = 0.1
    n_variants: int = 3
    text_dim: int = 384
    beta_ica: float = 0.3
    beta_bca: float = 0.3
    beta_opa: float = 0.2
    lambda_mpct: float = 0.3
    mpct_tau: float = 0.1
    # optimisation
    micro_batch: int = 8
    accumulation: int = 4
    process_count: int = 1
    epochs: float = 100.0
    warmup_epochs: float = 10.0
    peak_lr: float = 1e-4
    floor_lr: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    max_grad_norm: float = 1.0
    max_steps: int = 0  # 0 trains for the full epoch budget
    # preprocessing quality gate
    amp_bound: float = 25.0
    saturation_run: int = 50
    zero_fraction: float = 0.9
    # probe
    probe_l2: float = 1e-4

    def __post_init__(self):
        self.ablation = canonical_ablation(self.ablation)

    @property
    def n_patches(self) -> int:
        return n_patches(self.window, self.patch_len, self.patch_stride)

    @property
    def horizon(self) -> int:
        return self.pred_horizon or math.ceil(self.n_patches / 4)

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation * self.process_count

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls().with_overrides(_parse_pairs(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def with_overrides(self, pairs) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, value in pairs:
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, value, getattr(self, key))
        return self.replace(**changes)

    @classmethod
    def tiny(cls, **changes) -> "RunConfig":
        """Desk-scale preset used by smoke runs and gradient audits."""
        base = dict(window=3500, dim=32, depth=2, n_heads=4, decoder_depth=2, msps_hidden=64,
                    view_dim=32, text_dim=32, micro_batch=8, accumulation=4, epochs=15.0,
                    warmup_epochs=1.0, peak_lr=3e-3, floor_lr=1e-4, ramp_epochs=5.0)
        base.update(changes)
        return cls(**base)


def n_patches(length: int, patch_len: int, stride: int) -> int:
    if length < patch_len:
        raise ValueError(f"window {length} shorter than patch length {patch_len}")
    return (length - patch_len) // stride + 1


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def _parse_pairs(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        yield key.strip(), value


def parse_overrides(items) -> list[tuple[str, str]]:
    pairs = []
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        pairs.append((key.strip(), value))
    return pairs
