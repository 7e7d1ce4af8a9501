"""Checks on the shared smoke-trained encoder (session fixture, trained once)."""

import numpy as np
import pytest
from sklearn.base import clone

from marecg.estimators import MarEcgPretrainer
from marecg.ingest import preprocess, synth_corpus
from marecg.probe import extract_features


@pytest.fixture(scope="module")
def features(smoke_run, probe_corpus):
    records, Y, classes = probe_corpus
    return extract_features(smoke_run.model, records), Y, classes


def test_features_deterministic(smoke_run, probe_corpus, features):
    again = extract_features(smoke_run.model, probe_corpus[0])
    assert np.array_equal(features[0], again)


def test_non_collapse_across_classes(features):
    X, Y, classes = features
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    labels = Y.argmax(1)
    # one representative per class: every cross-class pair must be distinguishable
    reps = [np.flatnonzero(labels == k)[0] for k in range(len(classes))]
    cos = Xn[reps] @ Xn[reps].T
    off = cos[~np.eye(len(reps), dtype=bool)]
    assert off.max() < 0.999


def test_shape_guard(smoke_run):
    rec = preprocess(synth_corpus(1, 0, length=1000)[0], 1000)
    with pytest.raises(ValueError, match="shape"):
        extract_features(smoke_run.model, [rec])


class TestEstimator:
    def test_params(self):
        est = MarEcgPretrainer(ablation="C2", seed=3, max_steps=2)
        assert clone(est).get_params() == est.get_params()
        assert est.get_params()["ablation"] == "C2"

    def test_fit_transform_save_load(self, tmp_path):
        records = synth_corpus(6, 4, length=1000)
        overrides = dict(window=1000, dim=16, depth=1, n_heads=2, decoder_depth=1, msps_hidden=16, view_dim=8,
                         text_dim=8, proto_embed_dim=16, concept_dim=8, micro_batch=2, accumulation=1)
        est = MarEcgPretrainer(ablation="C3", max_steps=2, overrides=overrides).fit(records)
        Z = est.transform(records)
        assert Z.shape == (6, 16) and est.n_features_out_ == 16 and len(est.ledger_) == 2
        est.save(tmp_path / "m.ckpt")
        back = MarEcgPretrainer.load(tmp_path / "m.ckpt")
        assert np.array_equal(back.transform(records), Z)
        assert back._config() == est.config_
        X = np.stack([preprocess(r, 1000).signal for r in records])
        assert np.array_equal(back.transform(X), Z)

    def test_unfitted_and_bad_input(self):
        est = MarEcgPretrainer()
        with pytest.raises(Exception):
            est.transform([])
        with pytest.raises(ValueError):
            est.fit([])
        with pytest.raises(TypeError):
            est.fit([np.zeros((12, 100))])
