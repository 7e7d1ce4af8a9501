"""Scikit-learn style wrappers around pretraining and feature extraction."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .ingest import EcgRecord, preprocess
from .probe import extract_features
from .trainer import load_model, save_model, train


def check_records(records, n_leads: int | None = None) -> list[EcgRecord]:
    """Validate a record sequence: non-empty, 2-D finite float signals, consistent lead count."""
    records = list(records)
    if not records:
        raise ValueError("expected at least one record")
    for r in records:
        if not isinstance(r, EcgRecord):
            raise TypeError(f"expected EcgRecord, got {type(r).__name__}")
        if r.signal.ndim != 2:
            raise ValueError(f"record {r.id}: signal must be (leads, samples), got shape {r.signal.shape}")
        if n_leads is not None and r.signal.shape[0] != n_leads:
            raise ValueError(f"record {r.id}: expected {n_leads} leads, got {r.signal.shape[0]}")
    return records


def check_signal_batch(X, n_leads: int, length: int) -> np.ndarray:
    """Coerce to a finite float32 (B, C, L) array of the expected geometry."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (n_leads, length):
        raise ValueError(f"expected signals of shape (B, {n_leads}, {length}), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("signals contain NaN or Inf")
    return X


def ensure_preprocessed(records: Sequence[EcgRecord], cfg: RunConfig) -> list[EcgRecord]:
    return [r if r.revin is not None and r.signal.shape[1] == cfg.window else
            preprocess(r, cfg.window, cfg.amp_bound, cfg.saturation_run, cfg.zero_fraction)
            for r in records]


class MarEcgPretrainer(TransformerMixin, BaseEstimator):
    """Pretrain on ``EcgRecord`` lists with ``fit``; ``transform`` returns pooled rhythm embeddings.

    ``overrides`` holds any further ``RunConfig`` fields.
    """

    def __init__(self, ablation: str = "C3", preset: str = "tiny", seed: int = 0, max_steps: int = 0,
                 overrides: dict | None = None):
        self.ablation = ablation
        self.preset = preset
        self.seed = seed
        self.max_steps = max_steps
        self.overrides = overrides

    def _config(self) -> RunConfig:
        base = RunConfig.tiny() if self.preset == "tiny" else RunConfig()
        if self.preset not in ("tiny", "default"):
            raise ValueError(f"unknown preset {self.preset!r}")
        return base.replace(ablation=self.ablation, seed=self.seed, max_steps=self.max_steps,
                            **(self.overrides or {}))

    def fit(self, X, y=None):
        cfg = self._config()
        records = ensure_preprocessed(check_records(X, cfg.n_leads), cfg)
        result = train(cfg, records)
        self.config_ = cfg
        self.model_ = result.model
        self.ledger_ = result.ledger
        self.n_skipped_ = result.skipped
        self.n_features_out_ = cfg.dim
        return self

    def transform(self, X) -> np.ndarray:
        """Records are preprocessed as needed; a (B, C, L) array must already be normalised."""
        check_is_fitted(self, "model_")
        cfg = self.config_
        if isinstance(X, np.ndarray):
            X = check_signal_batch(X, cfg.n_leads, cfg.window)
            records = [EcgRecord(id=str(k), signal=x, fs=float(cfg.fs)) for k, x in enumerate(X)]
        else:
            records = ensure_preprocessed(check_records(X, cfg.n_leads), cfg)
        return extract_features(self.model_, records)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(path, self.model_, self.config_, step=len(self.ledger_), ledger_tail=self.ledger_[-5:])

    @classmethod
    def load(cls, path) -> "MarEcgPretrainer":
        model, manifest = load_model(path)
        cfg = model.cfg
        # params reproduce the stored config, so clone() and refit train the same model
        default = RunConfig()
        overrides = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
                     if f.name not in ("ablation", "seed", "max_steps")
                     and getattr(cfg, f.name) != getattr(default, f.name)}
        est = cls(ablation=cfg.ablation, preset="default", seed=cfg.seed, max_steps=cfg.max_steps,
                  overrides=overrides)
        est.config_, est.model_, est.ledger_ = cfg, model, list(manifest.get("ledger_tail", []))
        est.n_skipped_, est.n_features_out_ = 0, cfg.dim
        return est
