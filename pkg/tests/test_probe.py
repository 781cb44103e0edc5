import math

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import average_precision_score, roc_auc_score

from pulselab.probe import (EmbeddingSet, ProtocolError, auroc_binary, average_precision,
                            compute_metrics, fit_softmax, format_table, linear_probe,
                            semi_supervised)


def test_auroc_hand_toy():
    assert auroc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


@pytest.mark.parametrize("seed", range(10))
def test_metrics_match_sklearn(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 60)
    s = np.round(rng.standard_normal(60) + y, 1)  # rounding forces ties
    assert auroc_binary(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    assert average_precision(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


def test_metrics_invariant_to_monotone_transform():
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((80, 3))
    labels = rng.integers(0, 3, 80)
    a = compute_metrics(scores, labels)
    b = compute_metrics(np.exp(2 * scores) + 1, labels)
    assert (a.accuracy, a.auroc, a.auprc) == (b.accuracy, b.auroc, b.auprc)


def test_missing_class_is_skipped_with_warning():
    scores = np.eye(3)[[0, 1, 0, 1]]
    with pytest.warns(UserWarning):
        rep = compute_metrics(scores, np.array([0, 1, 0, 1]), 3)
    assert rep.per_class[2]["auroc"] is None
    assert rep.auroc == 1.0


@pytest.mark.parametrize("C", [0.1, 1.0, 10.0])
def test_softmax_matches_sklearn(C):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((150, 4))
    y = rng.integers(0, 3, 150)
    X[:, 0] += y
    W, b, _ = fit_softmax(X, y, 3, C=C, tol=1e-10, max_iter=10_000)
    ref = LogisticRegression(C=C, tol=1e-12, max_iter=10_000).fit(X, y)
    # intercepts are only identified up to a shared shift
    assert np.allclose(W, ref.coef_, atol=1e-5)
    assert np.allclose(b - b.mean(), ref.intercept_ - ref.intercept_.mean(), atol=1e-5)


def _emb(X, y, split):
    return EmbeddingSet(X, y, split)


def _splits(n, rng):
    return rng.choice(np.array(["train", "test"]), size=n, p=[0.6, 0.4])


def test_separable_toy_is_perfect():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 50)
    X = rng.standard_normal((200, 6)) * 0.1
    X[np.arange(200), y] += 5.0
    rep = linear_probe(_emb(X, y, _splits(200, rng)))
    assert rep.accuracy == 1.0


def test_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    S, n = 4, 4000
    X = rng.standard_normal((n, 8))
    y = rng.integers(0, S, n)
    split = _splits(n, rng)
    rep = linear_probe(_emb(X, y, split))
    n_test = int((split == "test").sum())
    se = math.sqrt((1 / S) * (1 - 1 / S) / n_test)
    assert abs(rep.accuracy - 1 / S) < 3 * se


def test_probe_standardizes_with_train_stats_only():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((40, 3))
    y = np.arange(40) % 2
    split = np.array(["train"] * 20 + ["test"] * 20)
    e = _emb(X, y, split)
    assert np.allclose(e.mean, X[:20].mean(axis=0))
    X2 = X.copy()
    X2[20:] += 100.0
    assert np.allclose(_emb(X2, y, split).mean, e.mean)


def test_probe_requires_all_classes():
    X = np.zeros((6, 2))
    y = np.array([0, 0, 1, 1, 2, 2])
    split = np.array(["train", "train", "train", "train", "test", "test"])
    with pytest.raises(ProtocolError):
        linear_probe(_emb(X, y, split))


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(5)
    y = np.repeat(np.arange(3), 60)
    X = rng.standard_normal((180, 5))
    X[np.arange(180), y] += 1.5
    return _emb(X, y, _splits(180, rng))


def test_semi_full_fraction_equals_probe(toy):
    full = linear_probe(toy)
    semi = semi_supervised(toy, 1.0, n_subsets=3)
    assert semi.accuracy == pytest.approx(full.accuracy, abs=1e-12)
    assert all(r["pseudo_rows"] == 0 for r in semi.extra["records"])


def test_semi_small_fraction_adds_pseudo_rows(toy):
    rep = semi_supervised(toy, 0.02, n_subsets=5, seed=3)
    assert rep.extra["records"][0]["n_labels"] == round(0.02 * (toy.split == "train").sum())
    assert any(r["pseudo_rows"] > 0 for r in rep.extra["records"])
    again = semi_supervised(toy, 0.02, n_subsets=5, seed=3)
    assert again.to_dict() == rep.to_dict()


def test_semi_resample_covers_classes(toy):
    rep = semi_supervised(toy, 0.1, n_subsets=3, coverage="resample")
    assert all(r["pseudo_rows"] == 0 for r in rep.extra["records"])


def test_semi_averages_over_embeddings(toy):
    rep = semi_supervised([toy, toy], 0.5, n_subsets=2)
    assert len(rep.extra["records"]) == 4


def test_format_table_aggregates():
    rows = [{"variant": "pulse", "sigma": 0.0, "accuracy": a, "auroc": 0.9, "auprc": 0.8}
            for a in (0.90, 0.92, 0.94)]
    text, summary = format_table(rows)
    assert text.splitlines()[0] == "variant,sigma,n,accuracy,auroc,auprc"
    assert "92.00 ± 2.00" in text
    assert summary[0]["n"] == 3
