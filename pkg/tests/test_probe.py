"""Embedding extraction and linear-probe training/evaluation."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from sklearn.linear_model import LogisticRegression

from chipmae.config import tiny_config
from chipmae.data import Chip, SyntheticSpec, generate_synthetic
from chipmae.model import ChipMAE
from chipmae.probe import (EmbeddingSet, LinearProbe, evaluate_probe,
                           extract_embeddings, labels_to_targets, train_probe)


def _tiny_model(seed=0):
    model = ChipMAE(tiny_config())
    model.init_parameters(torch.Generator().manual_seed(seed))
    return model


def _chips(count=6, label_mode="none", class_count=0, seed=0):
    return generate_synthetic(SyntheticSpec(
        count=count, height=16, width=16, bands=7, label_mode=label_mode,
        class_count=class_count, seed=seed))


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def test_labels_to_targets_single():
    chips = _chips(6, label_mode="single", class_count=3, seed=1)
    y = labels_to_targets(chips, 3, "single")
    assert y.dtype == np.int64 and y.shape == (6,)
    assert [int(v) for v in y] == [int(c.labels) for c in chips]


def test_labels_to_targets_multi():
    chips = _chips(6, label_mode="multi", class_count=5, seed=2)
    y = labels_to_targets(chips, 5, "multi")
    assert y.shape == (6, 5)
    for row, chip in zip(y, chips):
        assert sorted(np.flatnonzero(row).tolist()) == sorted(chip.labels)
    with pytest.raises(ValueError):
        labels_to_targets(chips, 5, "ordinal")


# ---------------------------------------------------------------------------
# Embedding extraction
# ---------------------------------------------------------------------------

def test_embedding_modes_and_shapes():
    model = _tiny_model()
    chips = _chips(5)
    d = model.config.embed_dim
    tokens = 5 + model.config.num_patches

    cls = extract_embeddings(model, chips, "cls")
    avg = extract_embeddings(model, chips, "avg")
    full = extract_embeddings(model, chips, "all")
    assert cls.shape == (5, d)
    assert avg.shape == (5, d)
    assert full.shape == (5, tokens * d)
    assert cls.dtype == np.float64

    # "all" is the per-token features laid out in sequence order.
    stacked = full.reshape(5, tokens, d)
    assert np.allclose(stacked[:, 4, :], cls, atol=1e-6)
    assert np.allclose(stacked.mean(axis=1), avg, atol=1e-6)

    with pytest.raises(ValueError):
        extract_embeddings(model, chips, "sum")


def test_embeddings_batch_size_invariant_and_deterministic():
    model = _tiny_model()
    chips = _chips(7)
    big = extract_embeddings(model, chips, "cls", batch_size=64)
    small = extract_embeddings(model, chips, "cls", batch_size=3)
    assert np.allclose(big, small, atol=1e-5)
    again = extract_embeddings(model, chips, "cls", batch_size=64)
    assert np.array_equal(big, again)


def test_embedding_set_validation():
    feats = np.zeros((3, 4))
    EmbeddingSet(feats, "cls")
    with pytest.raises(ValueError):
        EmbeddingSet(feats, "pooled")
    with pytest.raises(ValueError):
        EmbeddingSet(np.array([[np.nan, 0.0]]), "cls")
    with pytest.raises(ValueError):
        EmbeddingSet(feats, "cls", labels=np.zeros(2))


# ---------------------------------------------------------------------------
# Probe training
# ---------------------------------------------------------------------------

def _blobs(n_per=20, spread=4.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(loc=(-spread, 0.0), scale=0.5, size=(n_per, 2))
    b = rng.normal(loc=(spread, 0.0), scale=0.5, size=(n_per, 2))
    feats = np.concatenate([a, b])
    labels = np.concatenate([np.zeros(n_per, np.int64),
                             np.ones(n_per, np.int64)])
    return feats, labels


def test_probe_separates_blobs():
    feats, labels = _blobs()
    probe = train_probe(feats, labels, "single")
    scores = probe.scores(feats)
    assert np.array_equal(scores.argmax(axis=1), labels)
    report = evaluate_probe(probe, feats, labels)
    assert report.oa == 1.0
    assert report.map_micro == 1.0


def test_probe_constant_features_predict_the_prior():
    # With no signal in the features the optimum is a bias-only model that
    # outputs the class prior for every example.
    feats = np.zeros((8, 3))
    labels = np.array([0, 0, 0, 0, 0, 0, 1, 1])
    probe = train_probe(feats, labels, "single", grad_tol=1e-10)
    assert np.allclose(probe.weights, 0.0, atol=1e-6)
    scores = probe.scores(feats)
    assert np.allclose(scores, [[0.75, 0.25]] * 8, atol=1e-4)

    multi = np.zeros((8, 2))
    multi[:2, 0] = 1.0  # prevalence 0.25
    multi[:6, 1] = 1.0  # prevalence 0.75
    probe_m = train_probe(feats, multi, "multi", grad_tol=1e-10)
    scores_m = probe_m.scores(feats)
    assert np.allclose(scores_m[:, 0], 0.25, atol=1e-4)
    assert np.allclose(scores_m[:, 1], 0.75, atol=1e-4)


def test_probe_matches_sklearn_binary_per_class():
    rng = np.random.default_rng(3)
    n, d, c = 80, 5, 3
    feats = rng.normal(size=(n, d))
    w_true = rng.normal(size=(c, d))
    probs = 1.0 / (1.0 + np.exp(-(feats @ w_true.T)))
    targets = (rng.random((n, c)) < probs).astype(np.float64)
    targets[0] = [1.0, 0.0, 1.0]  # both outcomes present in every class
    targets[1] = [0.0, 1.0, 0.0]

    probe = train_probe(feats, targets, "multi", reg_c=1.0,
                        max_iter=5000, grad_tol=1e-9)
    for cls in range(c):
        ref = LogisticRegression(C=1.0, solver="lbfgs", tol=1e-10,
                                 max_iter=5000)
        ref.fit(feats, targets[:, cls])
        ours = probe.scores(feats)[:, cls]
        theirs = ref.predict_proba(feats)[:, list(ref.classes_).index(1.0)]
        assert np.max(np.abs(ours - theirs)) < 1e-3


def test_probe_matches_sklearn_multinomial():
    # Three classes so both sides use the same softmax parameterization.
    rng = np.random.default_rng(4)
    n, d, c = 90, 4, 3
    feats = rng.normal(size=(n, d))
    logits = feats @ rng.normal(size=(c, d)).T
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    labels = np.array([rng.choice(c, p=row) for row in p])

    probe = train_probe(feats, labels, "single", reg_c=1.0,
                        max_iter=5000, grad_tol=1e-9)
    ref = LogisticRegression(C=1.0, solver="lbfgs", tol=1e-10, max_iter=5000)
    ref.fit(feats, labels)
    assert np.max(np.abs(probe.scores(feats) - ref.predict_proba(feats))) < 1e-3


def test_probe_regularization_strength_matters():
    feats, labels = _blobs(spread=1.0)
    loose = train_probe(feats, labels, "single", reg_c=100.0)
    tight = train_probe(feats, labels, "single", reg_c=1e-3)
    assert np.linalg.norm(loose.weights) > np.linalg.norm(tight.weights)


def test_probe_input_validation():
    feats = np.zeros((4, 2))
    with pytest.raises(ValueError):
        train_probe(feats, np.zeros(4), "multi")  # needs a matrix
    with pytest.raises(ValueError):
        train_probe(feats, np.zeros(4, np.int64), "single")  # one class
    with pytest.raises(ValueError):
        train_probe(feats, np.zeros(4), "ranking")


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------

def test_evaluate_single_label_report():
    feats, labels = _blobs()
    probe = train_probe(feats, labels, "single")
    report = evaluate_probe(probe, feats, labels, mode="avg")
    assert report.task == "single" and report.mode == "avg"
    assert report.oa == 1.0
    assert len(report.per_class_ap) == 2
    assert report.f1_micro == 1.0 and report.f1_macro == 1.0


def test_evaluate_multi_label_report_and_threshold():
    feats = np.array([[2.0], [-2.0], [2.0], [-2.0]])
    targets = np.array([[1.0], [0.0], [1.0], [0.0]])
    probe = train_probe(feats, targets, "multi")
    report = evaluate_probe(probe, feats, targets)
    assert report.task == "multi"
    assert report.oa is None
    assert report.map_micro == 1.0
    # An impossible threshold empties the decision set: precision 0 by our
    # 0/0 convention, recall 0.
    strict = evaluate_probe(probe, feats, targets, threshold=1.0)
    assert strict.precision_micro == 0.0 and strict.recall_micro == 0.0


def test_report_serialization():
    feats, labels = _blobs()
    probe = train_probe(feats, labels, "single")
    report = evaluate_probe(probe, feats, labels)

    import json
    payload = json.loads(report.to_json())
    assert payload["oa"] == 1.0
    assert payload["task"] == "single"
    assert payload["per_class_ap"] == [1.0, 1.0]

    lines = report.to_csv().splitlines()
    assert lines[0] == "metric,value"
    keys = {line.split(",")[0] for line in lines[1:]}
    assert {"ap_class_0", "ap_class_1", "map_micro", "f1_macro", "oa"} <= keys


def test_probe_scores_shape_and_range():
    probe = LinearProbe(weights=np.array([[1.0, 0.0], [0.0, 1.0]]),
                        bias=np.zeros(2), task="single")
    s = probe.scores(np.array([[10.0, -10.0]]))
    assert s.shape == (1, 2)
    assert np.allclose(s.sum(axis=1), 1.0)
    probe_m = LinearProbe(weights=np.array([[1.0, 0.0]]),
                          bias=np.zeros(1), task="multi")
    sm = probe_m.scores(np.array([[0.0, 5.0]]))
    assert sm.shape == (1, 1)
    assert 0.0 < sm[0, 0] < 1.0
