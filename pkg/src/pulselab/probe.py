"""Frozen-embedding evaluation: metrics, linear probe and label-budget runs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .seeding import make_rng

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def auroc_binary(scores, positive):
    """Mann-Whitney AUROC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)  # average ranks
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, positive):
    """Step-wise area under the precision-recall curve (one point per distinct score)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    if n_pos == 0:
        return math.nan
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie block
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class MetricsReport:
    accuracy: float
    auroc: float
    auprc: float
    per_class: list = field(default_factory=list)
    n: int = 0
    seed: int | None = None
    config_hash: str | None = None
    averaging: str = "macro"
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def compute_metrics(scores, labels, n_classes=None):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError(f"scores {scores.shape} do not match {len(labels)} labels")
    S = scores.shape[1] if n_classes is None else n_classes
    accuracy = float(np.mean(np.argmax(scores, axis=1) == labels)) if len(labels) else math.nan
    per_class, aurocs, auprcs = [], [], []
    for c in range(S):
        pos = labels == c
        if not pos.any() or pos.all():
            warnings.warn(f"class {c} has no positives or no negatives; skipped in macro average")
            per_class.append({"class": c, "auroc": None, "auprc": None, "support": int(pos.sum())})
            continue
        a, p = auroc_binary(scores[:, c], pos), average_precision(scores[:, c], pos)
        aurocs.append(a)
        auprcs.append(p)
        per_class.append({"class": c, "auroc": a, "auprc": p, "support": int(pos.sum())})
    return MetricsReport(
        accuracy=accuracy,
        auroc=float(np.mean(aurocs)) if aurocs else math.nan,
        auprc=float(np.mean(auprcs)) if auprcs else math.nan,
        per_class=per_class,
        n=len(labels),
    )


# ---------------------------------------------------------------- probe


def _softmax_objective(Wb, X, Y1, weights, lam):
    """Weighted mean cross-entropy plus ``lam/2 ||W||^2``; returns value and gradient."""
    D = X.shape[1]
    W, b = Wb[:, :D], Wb[:, D]
    logits = X @ W.T + b
    lse = logsumexp(logits, axis=1)
    wsum = weights.sum()
    ce = np.sum(weights * (lse - np.sum(logits * Y1, axis=1))) / wsum
    P = np.exp(logits - lse[:, None])
    R = (P - Y1) * (weights / wsum)[:, None]
    gW = R.T @ X + lam * W
    gb = R.sum(axis=0)
    return ce + 0.5 * lam * np.sum(W * W), np.hstack([gW, gb[:, None]])


def fit_softmax(X, y, n_classes, C=1.0, sample_weight=None, max_iter=2000, tol=1e-6):
    """Multinomial logistic regression by full-batch gradient descent.

    Penalty follows the ``C`` convention: total objective
    ``C * sum_i w_i CE_i + ||W||^2 / 2``, here divided by ``C * sum_i w_i``.
    Steps start from a Barzilai-Borwein guess and backtrack until Armijo's
    condition holds.  Weights start at zero.
    """
    X = np.asarray(X, dtype=np.float64)
    N, D = X.shape
    weights = np.ones(N) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    lam = 1.0 / (C * weights.sum())
    Y1 = np.zeros((N, n_classes))
    Y1[np.arange(N), y] = 1.0
    Wb = np.zeros((n_classes, D + 1))
    f, g = _softmax_objective(Wb, X, Y1, weights, lam)
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            break
        while True:
            cand = Wb - step * g
            fc, gc = _softmax_objective(cand, X, Y1, weights, lam)
            if fc <= f - 1e-4 * step * gnorm**2 or step < 1e-12:
                break
            step *= 0.5
        s, yv = cand - Wb, gc - g
        Wb, f, g = cand, fc, gc
        sy = float(np.vdot(s, yv))
        step = float(np.vdot(s, s)) / sy if sy > 0 else step * 2.0
    return Wb[:, :D], Wb[:, D], {"iterations": it, "grad_norm": float(np.linalg.norm(g))}


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    mean: np.ndarray = None
    std: np.ndarray = None
    config_hash: str | None = None
    seed: int | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split)
        if self.mean is None:
            train = self.vectors[self.split == "train"]
            if len(train) == 0:
                raise ProtocolError("no train rows to standardize with")
            self.mean = train.mean(axis=0)
            sd = train.std(axis=0)
            self.std = np.where(sd > 0, sd, 1.0)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def standardized(self, split):
        m = self.split == split
        return (self.vectors[m] - self.mean) / self.std, self.labels[m]


def embed(model, dataset, config_hash=None, seed=None):
    return EmbeddingSet(model.embed(dataset.windows), dataset.labels, dataset.split,
                        config_hash=config_hash, seed=seed)


def linear_probe(emb, C=1.0, max_iter=2000, tol=1e-6, sample=None, extra_rows=None):
    """Fit on train (optionally a subset and pseudo-rows), score on test."""
    Xtr, ytr = emb.standardized("train")
    weights = np.ones(len(ytr))
    if sample is not None:
        Xtr, ytr, weights = Xtr[sample], ytr[sample], weights[sample]
    if extra_rows is not None:
        Xe, ye = extra_rows
        Xtr = np.vstack([Xtr, Xe])
        ytr = np.r_[ytr, ye]
        weights = np.r_[weights, np.ones(len(ye))]
    S = emb.n_classes
    missing = sorted(set(range(S)) - set(ytr.tolist()))
    if missing:
        raise ProtocolError(f"classes {missing} absent from probe training data")
    if S < 2:
        raise ProtocolError("probe needs at least two classes")
    W, b, info = fit_softmax(Xtr, ytr, S, C, weights, max_iter, tol)
    Xte, yte = emb.standardized("test")
    report = compute_metrics(Xte @ W.T + b, yte, S)
    report.seed, report.config_hash = emb.seed, emb.config_hash
    report.extra.update(info)
    return report


def semi_supervised(embeddings, fraction, n_subsets=5, seed=0, coverage="laplace"):
    """Average probe accuracy over label subsets of the train split.

    ``embeddings`` is one :class:`EmbeddingSet` or a list (one per model
    seed).  Missing classes get one pseudo-row at the class train mean
    (``coverage="laplace"``) or the subset is redrawn (``"resample"``).
    """
    if isinstance(embeddings, EmbeddingSet):
        embeddings = [embeddings]
    if coverage not in ("laplace", "resample"):
        raise ValueError(f"unknown coverage rule {coverage!r}")
    records = []
    for e_idx, emb in enumerate(embeddings):
        Xtr, ytr = emb.standardized("train")
        n = int(round(fraction * len(ytr)))
        if n < 1:
            raise ProtocolError(f"fraction {fraction} leaves no labelled windows")
        S = emb.n_classes
        for r in range(n_subsets):
            rng = make_rng(seed, "subset", e_idx, r)
            pick = np.sort(rng.choice(len(ytr), size=n, replace=False))
            draws = 1
            while coverage == "resample" and len(set(ytr[pick].tolist())) < S:
                pick = np.sort(rng.choice(len(ytr), size=n, replace=False))
                draws += 1
                if draws > 10_000:
                    raise ProtocolError("could not draw a subset covering every class")
            missing = sorted(set(range(S)) - set(ytr[pick].tolist()))
            extra = None
            if missing:
                log.info("label subset misses classes %s; adding mean pseudo-rows", missing)
                extra = (np.stack([Xtr[ytr == c].mean(axis=0) for c in missing]), np.array(missing))
            rep = linear_probe(emb, sample=pick, extra_rows=extra)
            records.append({"embedding": e_idx, "subset": r, "n_labels": n,
                            "accuracy": rep.accuracy, "auroc": rep.auroc, "auprc": rep.auprc,
                            "pseudo_rows": len(missing)})
    agg = MetricsReport(
        accuracy=float(np.mean([r["accuracy"] for r in records])),
        auroc=float(np.nanmean([r["auroc"] for r in records])),
        auprc=float(np.nanmean([r["auprc"] for r in records])),
        n=len(records),
        seed=seed,
        config_hash=embeddings[0].config_hash,
        extra={"fraction": fraction, "records": records},
    )
    return agg


# ---------------------------------------------------------------- tables


def format_table(rows, columns=("accuracy", "auroc", "auprc")):
    """Mean ± std over seeds per (variant, sigma) from flat result rows."""
    groups = {}
    for r in rows:
        groups.setdefault((r["variant"], float(r.get("sigma", math.nan))), []).append(r)
    out = io.StringIO()
    header = ["variant", "sigma", "n"] + list(columns)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    summary = []
    for (variant, sigma), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        row = [variant, sigma, len(rs)]
        entry = {"variant": variant, "sigma": sigma, "n": len(rs)}
        for c in columns:
            vals = np.array([float(r[c]) for r in rs])
            mu, sd = vals.mean(), vals.std(ddof=1) if len(vals) > 1 else 0.0
            row.append(f"{100 * mu:.2f} ± {100 * sd:.2f}")
            entry[c] = (float(mu), float(sd))
        w.writerow(row)
        summary.append(entry)
    return out.getvalue(), summary
