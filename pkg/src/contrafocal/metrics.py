"""Ranking metrics, embedding-geometry scores and the frozen-embedding probe."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from average ranks (ties count one half)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Thresholds are the distinct scores in descending order; each threshold
    contributes (recall gain) x (precision at that threshold).
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    precision = tp / seen
    recall = tp / n_pos
    gain = np.diff(np.r_[0.0, recall])
    return float(np.sum(gain * precision))


def _unit(v, what):
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError(f"{what} is the zero vector")
    return v / norm


def class_center(embeddings, normalize_members: bool = False) -> np.ndarray:
    """Unit-length class center: mean-then-normalize, or normalize-then-mean."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if normalize_members:
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero embedding cannot be normalized")
        emb = emb / norms
    return _unit(emb.mean(axis=0), "class center")


def ess(pos_embeddings, neg_embeddings, normalize_members: bool = False) -> float:
    """Embedding separation score ||c_p - c_n|| / (||c_p|| + ||c_n||) on unit centers."""
    if len(pos_embeddings) == 0 or len(neg_embeddings) == 0:
        raise ValueError("ESS needs both groups nonempty")
    cp = class_center(pos_embeddings, normalize_members)
    cn = class_center(neg_embeddings, normalize_members)
    return float(np.linalg.norm(cp - cn) / (np.linalg.norm(cp) + np.linalg.norm(cn)))


def intra_class_sd(embeddings, normalize_members: bool = False) -> float:
    """Population SD of member-to-center separation, measured like ESS."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] < 2:
        raise ValueError("intra-class SD needs >= 2 members")
    c = class_center(emb, normalize_members)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero embedding cannot be normalized")
    unit = emb / norms
    d = np.linalg.norm(unit - c, axis=1) / (1.0 + np.linalg.norm(c))
    return float(d.std())


def fit_logistic(X, y, iters: int = 500, lr: float = 0.1, l2: float = 1e-4):
    """Full-batch gradient descent on the mean logistic loss plus (l2/2)||w||^2."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(iters):
        r = expit(X @ w + b) - y
        w -= lr * (X.T @ r / n + l2 * w)
        b -= lr * r.mean()
    return w, b


def linear_probe(train_emb, train_labels, test_emb, test_labels, **fit_kw) -> float:
    """Test AUROC of a logistic classifier fit on frozen embeddings."""
    train_labels = np.asarray(train_labels)
    if np.unique(train_labels).size < 2:
        raise ValueError("probe training split must contain both classes")
    if np.unique(np.asarray(test_labels)).size < 2:
        raise ValueError("probe test split must contain both classes")
    w, b = fit_logistic(train_emb, train_labels, **fit_kw)
    return auroc(np.asarray(test_emb) @ w + b, test_labels)


@dataclass
class MetricsReport:
    auroc: float = math.nan
    auprc: float = math.nan
    ess: float = math.nan
    sd_positive: float = math.nan
    sd_negative: float = math.nan
    probe_auroc: float = math.nan
    seed: int | None = None
    split: str = ""

    def validate(self, required=("auroc", "auprc")) -> None:
        for name in required:
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} is not finite")
        for name in ("auroc", "auprc", "ess", "probe_auroc"):
            v = getattr(self, name)
            if np.isfinite(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


def classification_report(scores, labels, **meta) -> MetricsReport:
    return MetricsReport(auroc=auroc(scores, labels), auprc=auprc(scores, labels), **meta)


def embedding_report(train_emb, train_labels, test_emb, test_labels, **meta) -> MetricsReport:
    """Probe AUROC plus ESS and per-class SDs, geometry measured on the test embeddings."""
    test_emb = np.asarray(test_emb)
    test_labels = np.asarray(test_labels)
    pos, neg = test_emb[test_labels == 1], test_emb[test_labels == 0]
    return MetricsReport(
        ess=ess(pos, neg),
        sd_positive=intra_class_sd(pos),
        sd_negative=intra_class_sd(neg),
        probe_auroc=linear_probe(train_emb, train_labels, test_emb, test_labels),
        **meta,
    )


def export_embeddings(path, ids, labels, embeddings) -> None:
    """One line per patient: id, label, embedding values."""
    lines = []
    for i, y, z in zip(ids, labels, np.asarray(embeddings)):
        lines.append(",".join([str(int(i)), str(int(y))] + [repr(float(v)) for v in z]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path):
    rows = [line.split(",") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    ids = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    emb = np.array([[float(v) for v in r[2:]] for r in rows])
    return ids, labels, emb
