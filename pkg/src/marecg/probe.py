"""Frozen-encoder linear probing: feature extraction, label-fraction splits,
one-vs-rest logistic regression and macro AUC."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.special import expit
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)


# -- features --------------------------------------------------------------------


@torch.no_grad()
def extract_features(model, records, batch_size: int = 16) -> np.ndarray:
    """Pooled rhythm embeddings, one row per record, with the model in eval mode."""
    cfg = model.cfg
    for r in records:
        if r.signal.shape != (cfg.n_leads, cfg.window):
            raise ValueError(f"record {r.id} has shape {r.signal.shape}, checkpoint expects "
                             f"{(cfg.n_leads, cfg.window)}")
    was_training = model.training
    model.eval()
    try:
        rows = []
        for i in range(0, len(records), batch_size):
            x = torch.from_numpy(np.stack([r.signal for r in records[i:i + batch_size]]).astype(np.float32))
            rows.append(model.features(x).numpy())
    finally:
        model.train(was_training)
    if not rows:
        return np.zeros((0, cfg.dim))
    return np.concatenate(rows).astype(np.float64)


# -- splits ----------------------------------------------------------------------


def label_fraction_split(Y, rho: float, seed: int = 0) -> np.ndarray:
    """Stratified subset of record indices keeping about ``rho`` of each class's positives.

    Classes are served rarest first; any class with a positive keeps at least
    one. Remaining slots up to round(rho * n) go to records that do not push a
    class past its quota, label-free records first.
    """
    Y = np.asarray(Y).astype(bool)
    if Y.ndim == 1:
        Y = Y[:, None]
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    n, K = Y.shape
    if rho == 1:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    pos = Y.sum(axis=0)
    quota = np.where(pos > 0, np.maximum(1, np.rint(rho * pos)), 0).astype(int)
    chosen = np.zeros(n, dtype=bool)
    counts = np.zeros(K, dtype=int)
    for k in np.argsort(pos, kind="stable"):
        pool = rng.permutation(np.flatnonzero(Y[:, k] & ~chosen))
        while counts[k] < quota[k] and pool.size:
            # co-occurring labels count too: take the record that overshoots fewest other quotas
            j = int(np.argmin((Y[pool] & (counts >= quota)).sum(axis=1)))
            chosen[pool[j]] = True
            counts += Y[pool[j]]
            pool = np.delete(pool, j)
    target = max(int(np.rint(rho * n)), int(chosen.sum()))
    rest = rng.permutation(np.flatnonzero(~chosen))
    rest = sorted(rest, key=lambda i: Y[i].any())  # stable: label-free records first
    for i in rest:
        if chosen.sum() >= target:
            break
        if np.all(counts + Y[i] <= quota):
            chosen[i] = True
            counts += Y[i]
    return np.flatnonzero(chosen)


# -- AUC -----------------------------------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class AucReport:
    macro: float
    per_class: np.ndarray  # nan for excluded classes
    excluded: tuple[int, ...]


def macro_auc(scores, Y) -> AucReport:
    scores = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(Y).astype(bool)
    if Y.ndim == 1:
        Y, scores = Y[:, None], scores.reshape(-1, 1)
    per_class = np.full(Y.shape[1], np.nan)
    excluded = []
    for k in range(Y.shape[1]):
        if Y[:, k].all() or not Y[:, k].any():
            excluded.append(k)
            continue
        per_class[k] = roc_auc(scores[:, k], Y[:, k])
    if len(excluded) == Y.shape[1]:
        raise ValueError("no class has both positives and negatives")
    if excluded:
        logger.info("AUC excluded classes without both labels: %s", excluded)
    return AucReport(float(np.nanmean(per_class)), per_class, tuple(excluded))


# -- logistic regression --------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryFit:
    coef: np.ndarray
    intercept: float
    n_iter: int
    grad_norm: float
    degenerate: bool


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 100) -> BinaryFit:
    """Newton's method on mean log-loss + (l2/2)|w|^2 with an unpenalised intercept.

    A class with a single label value gets w = 0 and the intercept of its
    clipped prior, which scores every record identically.
    """
    n, d = X.shape
    y = np.asarray(y, dtype=np.float64)
    if y.min() == y.max():
        prior = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        return BinaryFit(np.zeros(d), float(np.log(prior / (1 - prior))), 0, 0.0, True)
    Xa = np.hstack([X, np.ones((n, 1))])
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    theta = np.zeros(d + 1)

    def objective(t):
        z = Xa @ t
        return np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(reg * t * t)

    g_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(Xa @ theta)
        grad = Xa.T @ (p - y) / n + reg * theta
        g_norm = float(np.linalg.norm(grad))
        if g_norm <= tol:
            break
        hess = (Xa * (p * (1 - p))[:, None]).T @ Xa / n + np.diag(reg) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(hess, grad)
        f0, t = objective(theta), 1.0
        while objective(theta - t * step) > f0 - 1e-4 * t * grad @ step and t > 1e-10:
            t *= 0.5
        theta = theta - t * step
    else:
        p = expit(Xa @ theta)
        g_norm = float(np.linalg.norm(Xa.T @ (p - y) / n + reg * theta))
        if g_norm > tol:
            logger.warning("logistic probe stopped at gradient norm %.3g after %d iterations", g_norm, max_iter)
    return BinaryFit(theta[:-1], float(theta[-1]), it, g_norm, False)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """One-vs-rest L2 logistic regression over frozen features (multi-label ``Y``)."""

    def __init__(self, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 100, standardize: bool = True):
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter
        self.standardize = standardize

    def fit(self, X, Y):
        X = check_array(X, dtype=np.float64)
        Y = np.asarray(Y)
        self.multilabel_ = Y.ndim == 2
        Y2 = Y if self.multilabel_ else Y[:, None]
        if Y2.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y2.shape[0]}")
        self.mean_ = X.mean(axis=0) if self.standardize else np.zeros(X.shape[1])
        self.scale_ = np.maximum(X.std(axis=0), 1e-12) if self.standardize else np.ones(X.shape[1])
        Xs = (X - self.mean_) / self.scale_
        fits = [fit_logistic(Xs, Y2[:, k], self.l2, self.tol, self.max_iter) for k in range(Y2.shape[1])]
        self.coef_ = np.stack([f.coef for f in fits])
        self.intercept_ = np.array([f.intercept for f in fits])
        self.degenerate_ = np.array([f.degenerate for f in fits])
        self.grad_norms_ = np.array([f.grad_norm for f in fits])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        scores = ((X - self.mean_) / self.scale_) @ self.coef_.T + self.intercept_
        return scores if self.multilabel_ else scores[:, 0]

    def predict_proba(self, X):
        return expit(self.decision_function(X))

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def score(self, X, Y, sample_weight=None):
        return macro_auc(self.decision_function(X), Y).macro

    def config_hash(self) -> str:
        text = f"l2={self.l2!r} tol={self.tol!r} max_iter={self.max_iter} standardize={self.standardize}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- evaluation runs ---------------------------------------------------------------------------


def holdout_split(Y, test_fraction: float = 0.3, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test indices; the test part is a label-fraction draw."""
    Y = np.asarray(Y)
    test = label_fraction_split(Y, test_fraction, seed)
    train = np.setdiff1d(np.arange(len(Y)), test)
    return train, test


def run_probe(features, Y, class_names: Sequence[str], fractions=(1.0, 0.1, 0.01), seeds=(0,),
              task: str = "synthetic", probe: LinearProbe | None = None, test_fraction: float = 0.3,
              split_seed: int = 0) -> list[dict]:
    features, Y = np.asarray(features), np.asarray(Y)
    probe = probe or LinearProbe()
    train_idx, test_idx = holdout_split(Y, test_fraction, split_seed)
    rows = []
    for rho in fractions:
        for seed in seeds:
            sub = train_idx[label_fraction_split(Y[train_idx], rho, seed)]
            fitted = LinearProbe(**probe.get_params()).fit(features[sub], Y[sub])
            report = macro_auc(fitted.decision_function(features[test_idx]), Y[test_idx])
            row = {"task": task, "fraction": rho, "seed": seed, "macro_auc": report.macro,
                   "probe_config": fitted.config_hash()}
            for name, auc in zip(class_names, report.per_class):
                row[f"auc_{name}"] = auc
            rows.append(row)
    return rows


def dumps_results(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    columns = list(rows[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if isinstance(row[c], float) and np.isnan(row[c]) else
                         (f"{row[c]:.6f}" if isinstance(row[c], float) else row[c]) for c in columns])
    return buf.getvalue()
