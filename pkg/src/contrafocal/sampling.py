"""Positive-sample selection: k-random, feature-space kNN, attribute-space kNN.

Graphs are always built within class, so every neighbor shares its node's
label.  Scores are compared after rounding to 12 decimals, and ties go to the
lower node index.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

# scores are rounded before ranking so that mathematically equal similarities
# (e.g. a vector and a rescaled copy) tie exactly instead of by rounding noise
SCORE_DECIMALS = 12


class Strategy(str, enum.Enum):
    RANDOM = "random"
    FEATURE = "feature"
    ATTRIBUTE = "attribute"


class Metric(str, enum.Enum):
    COSINE = "cosine-on-embeddings"
    ATTRIBUTE = "attribute-distance"


@dataclass(frozen=True)
class KnnGraph:
    k: int
    neighbors: tuple  # per node: ndarray of node indices, best first
    labels: np.ndarray
    metric: Metric
    class_restricted: bool = True

    def __len__(self) -> int:
        return len(self.neighbors)

    def adjacency(self) -> list[list[int]]:
        return [nb.tolist() for nb in self.neighbors]

    def dump(self, path, ids=None) -> None:
        """One line per node: id, label, neighbor ids in rank order."""
        ids = np.arange(len(self)) if ids is None else np.asarray(ids)
        lines = []
        for i, nb in enumerate(self.neighbors):
            cells = [str(ids[i]), str(int(self.labels[i]))] + [str(ids[j]) for j in nb]
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(a @ b / (na * nb))


def scale_attributes(raw, mask=None) -> np.ndarray:
    """Standardize each column, then min-max the result onto [0, 1].

    Masked cells get the scaled column mean.  Zero-variance columns map to 0.5.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.isfinite(raw) if mask is None else np.asarray(mask, dtype=bool)
    out = np.empty_like(raw)
    for j in range(raw.shape[1]):
        obs = raw[mask[:, j], j]
        if obs.size < 2:
            raise ValueError(f"column {j}: need >= 2 observed values, got {obs.size}")
        sd = obs.std()
        if sd == 0:
            out[:, j] = 0.5
            continue
        z = (obs - obs.mean()) / sd
        lo, hi = z.min(), z.max()
        col = np.full(raw.shape[0], (0.0 - lo) / (hi - lo))
        col[mask[:, j]] = (z - lo) / (hi - lo)
        out[:, j] = col
    return out


def select_channels(observed, min_fraction: float = 0.8) -> np.ndarray:
    """Indices of channels observed for at least ``min_fraction`` of patients."""
    frac = np.asarray(observed, dtype=bool).mean(axis=0)
    return np.flatnonzero(frac >= min_fraction)


def attribute_distance(x_i, x_j, selected=None) -> float:
    """Sum over selected channels of |x_i - x_j|."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValueError(f"dimension mismatch: {x_i.shape} vs {x_j.shape}")
    sel = np.arange(x_i.size) if selected is None else np.asarray(selected)
    if sel.size == 0:
        raise ValueError("selected channel set is empty")
    return float(np.abs(x_i[sel] - x_j[sel]).sum())


def _top_k(score: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row, ties to the lower index.

    ``score`` has -inf on entries that must never be chosen.
    """
    n_cols = score.shape[1]
    k = min(k, n_cols - 1)
    rows = []
    if k <= 0:
        return [np.empty(0, dtype=np.int64) for _ in range(score.shape[0])]
    kth = -np.partition(-score, k - 1, axis=1)[:, k - 1]
    for i in range(score.shape[0]):
        cand = np.flatnonzero(score[i] >= kth[i])
        order = np.lexsort((cand, -score[i, cand]))
        rows.append(cand[order[:k]])
    return rows


def _build(score_fn, labels, k: int, metric: Metric) -> KnnGraph:
    labels = np.asarray(labels)
    n = labels.size
    neighbors = [None] * n
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            logger.warning("class %s has a single member; node %d gets no neighbors", c, members[0])
            neighbors[members[0]] = np.empty(0, dtype=np.int64)
            continue
        score = np.round(score_fn(members), SCORE_DECIMALS)
        np.fill_diagonal(score, -np.inf)
        for local, nb in enumerate(_top_k(score, k)):
            neighbors[members[local]] = members[nb]
    return KnnGraph(k=k, neighbors=tuple(neighbors), labels=labels.copy(), metric=metric)


def build_feature_knn(embeddings, labels, k: int) -> KnnGraph:
    """Within-class kNN graph on cosine similarity of embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero embedding: cosine similarity undefined")
    unit = emb / norms

    def score(members):
        u = unit[members]
        return u @ u.T

    return _build(score, labels, k, Metric.COSINE)


def build_attribute_knn(scaled, labels, selected, k: int) -> KnnGraph:
    """Within-class kNN graph on summed absolute attribute differences."""
    x = np.asarray(scaled, dtype=np.float64)[:, np.asarray(selected)]
    if x.shape[1] == 0:
        raise ValueError("selected channel set is empty")

    def score(members):
        return -cdist(x[members], x[members], metric="cityblock")

    return _build(score, labels, k, Metric.ATTRIBUTE)


class ClassIndex:
    """Per-class member lists for fast same-label draws."""

    def __init__(self, labels):
        self.labels = np.asarray(labels)
        self.members = {c: np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}
        self.position = np.empty(self.labels.size, dtype=np.int64)
        for idx in self.members.values():
            self.position[idx] = np.arange(idx.size)


def sample_k_random(anchor: int, labels, K: int, rng, index: ClassIndex | None = None) -> np.ndarray:
    """K same-class indices excluding the anchor, uniform over the pool."""
    index = ClassIndex(labels) if index is None else index
    members = index.members[index.labels[anchor]]
    pool = members.size - 1
    if pool < 1:
        raise ValueError(f"anchor {anchor} is the only member of its class")
    draw = rng.choice(pool, size=K, replace=pool < K)
    # skip over the anchor's own slot
    draw = draw + (draw >= index.position[anchor])
    return members[draw]


def sample_from_graph(anchor: int, graph: KnnGraph, K: int, rng, index: ClassIndex | None = None):
    nb = graph.neighbors[anchor]
    if nb.size == 0:
        logger.info("node %d has no graph neighbors; falling back to k-random", anchor)
        return sample_k_random(anchor, graph.labels, K, rng, index)
    return nb[rng.choice(nb.size, size=K, replace=nb.size < K)]
