"""Focal loss, the K-positive contrastive regularizer, and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

PROB_EPS = 1e-12


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: float = 0.2
    tau: float = 1.0
    K: int = 5
    normalize_embeddings: bool = True

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


def _p_true(prob, label):
    prob = np.clip(np.asarray(prob, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    label = np.asarray(label)
    return np.where(label == 1, prob, 1.0 - prob)


def focal_loss(prob, label, gamma: float = 2.0):
    """Elementwise ``-(1 - p_t)**gamma * log(p_t)``."""
    pt = _p_true(prob, label)
    out = -((1.0 - pt) ** gamma) * np.log(pt)
    return float(out) if out.ndim == 0 else out


def focal_loss_mean(prob, label, gamma: float = 2.0) -> float:
    return float(np.mean(focal_loss(np.atleast_1d(prob), np.atleast_1d(label), gamma)))


def focal_grad_logit(prob, label, gamma: float = 2.0) -> np.ndarray:
    """d focal / d logit, per sample (no batch averaging).

    Uses dp_t/dlogit = +-p_t(1-p_t), folded in analytically so the gamma < 1
    case stays finite at p_t -> 1.
    """
    pt = _p_true(prob, label)
    sign = np.where(np.asarray(label) == 1, 1.0, -1.0)
    q = 1.0 - pt
    return sign * (gamma * q**gamma * pt * np.log(pt) - q ** (gamma + 1.0))


def cross_entropy(prob, label):
    return -np.log(_p_true(prob, label))


@dataclass
class ContrastiveBatch:
    anchors: np.ndarray  # (N, D)
    positives: np.ndarray  # (N, K, D)

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.positives = np.asarray(self.positives, dtype=np.float64)
        N = self.anchors.shape[0]
        if N < 2:
            raise ValueError("contrastive batch needs N >= 2 anchors (no negatives otherwise)")
        if self.positives.ndim != 3 or self.positives.shape[0] != N:
            raise ValueError(f"positives must be (N, K, D), got {self.positives.shape}")
        if self.positives.shape[2] != self.anchors.shape[1]:
            raise ValueError("anchor and positive dimensions differ")

    @property
    def N(self) -> int:
        return self.anchors.shape[0]

    @property
    def K(self) -> int:
        return self.positives.shape[1]


def _normalize(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero embedding")
    return x / norm, norm


def _normalize_backward(y, norm, dy):
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norm


def contrastive_loss_and_grad(anchors, positives, tau: float = 1.0, normalize: bool = True):
    """Value and gradients of the K-positive contrastive loss.

    For anchor p, the negatives are the K positives of every other anchor in
    the batch, so each log-term has denominator
    ``exp(s_pi) + sum_{j != p, l} exp(s_{p,(j,l)})``.  Returns
    ``(loss, d_anchors (N, D), d_positives (N, K, D))``.
    """
    batch = ContrastiveBatch(anchors, positives)
    N, K = batch.N, batch.K
    A, P = batch.anchors, batch.positives
    if normalize:
        A, a_norm = _normalize(A)
        P, p_norm = _normalize(P)
    Q = P.reshape(N * K, -1)
    logits = (A @ Q.T) / tau  # (N, N*K); column j*K + l is positive l of anchor j

    owner = np.repeat(np.arange(N), K)
    own = owner[None, :] == np.arange(N)[:, None]
    neg_logits = np.where(own, -np.inf, logits)
    lse_neg = logsumexp(neg_logits, axis=1)  # (N,)
    pos = logits[own].reshape(N, K)
    log_den = np.logaddexp(pos, lse_neg[:, None])
    loss = float(np.sum(log_den - pos) / N)

    # d/d pos: softmax weight of the positive minus one
    g_pos = np.exp(pos - log_den) - 1.0
    # d/d neg (p, c) = exp(s_pc) * sum_i 1/D_pi, rewritten so the scale is bounded by K
    scale = np.exp(lse_neg[:, None] - log_den).sum(axis=1)
    g_neg = np.where(own, 0.0, np.exp(neg_logits - lse_neg[:, None])) * scale[:, None]
    G = g_neg
    G[own] = g_pos.ravel()
    G /= N * tau

    dA = G @ Q
    dQ = G.T @ A
    dP = dQ.reshape(N, K, -1)
    if normalize:
        dA = _normalize_backward(A, a_norm, dA)
        dP = _normalize_backward(P, p_norm, dP)
    return loss, dA, dP


def contrastive_loss(anchors, positives, tau: float = 1.0, normalize: bool = True) -> float:
    return contrastive_loss_and_grad(anchors, positives, tau, normalize)[0]


def uniform_similarity_loss(N: int, K: int) -> float:
    """Closed form when every similarity logit is equal."""
    return K * np.log1p((N - 1) * K)


def combined_loss(focal: float, contrastive: float, alpha: float) -> float:
    return focal + alpha * contrastive
