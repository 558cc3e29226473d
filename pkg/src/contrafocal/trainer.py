"""Mini-batch training with the focal + contrastive objective and Adam."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder, losses, sampling
from .cohort import check_dims, patient_attributes, stack
from .losses import LossConfig
from .sampling import Strategy

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    JOINT = "joint"
    PRETRAIN = "pretrain"


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 6
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    strategy: Strategy | None = Strategy.RANDOM
    mode: Mode = Mode.JOINT
    seed: int = 0
    hidden: int = 50
    static_out: int = 50
    graph_k: int | None = None  # neighbors kept per node; defaults to loss.K
    attribute_min_fraction: float = 0.8

    def __post_init__(self):
        if self.strategy is not None:
            self.strategy = Strategy(self.strategy)
        self.mode = Mode(self.mode)

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.mode is Mode.PRETRAIN and self.strategy is None:
            raise ValueError("pretrain mode needs a sampling strategy")
        self.loss.validate()


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, blocks=None):
    """Bias-corrected Adam update, applied in place to ``params.arrays``."""
    beta1, beta2 = betas
    names = list(params.arrays) if blocks is None else list(blocks)
    for name in names:
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name in names:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params.arrays[name] = params.arrays[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.version += 1
    return params, state


@dataclass
class TraceRow:
    epoch: int
    batch: int
    focal: float
    contrastive: float
    combined: float


@dataclass
class TrainedModel:
    params: encoder.ModelParams
    channel_mean: np.ndarray
    trace: list
    embeddings: np.ndarray
    ids: np.ndarray
    labels: np.ndarray
    graph_builds: list = field(default_factory=list)  # epoch index (-1 = before training)

    def epoch_losses(self) -> np.ndarray:
        epochs = np.array([r.epoch for r in self.trace])
        combined = np.array([r.combined for r in self.trace])
        return np.array([combined[epochs == e].mean() for e in np.unique(epochs)])

    def write_trace(self, path) -> None:
        lines = ["epoch,batch,focal,contrastive,combined"]
        lines += [f"{r.epoch},{r.batch},{r.focal!r},{r.contrastive!r},{r.combined!r}" for r in self.trace]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing singleton joins the previous batch."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def attribute_graph(records, labels, cfg: TrainConfig):
    """Attribute kNN graph from per-patient channel means over well-observed channels."""
    attrs, observed = patient_attributes(records)
    selected = sampling.select_channels(observed, cfg.attribute_min_fraction)
    if selected.size == 0:
        raise ValueError("no channel meets the attribute observation threshold")
    scaled = sampling.scale_attributes(attrs[:, selected], observed[:, selected])
    return sampling.build_attribute_knn(scaled, labels, np.arange(selected.size), cfg.graph_k or cfg.loss.K)


def embed(params, X, static, chunk: int = 1024) -> np.ndarray:
    out = [encoder.forward_batch(X[i : i + chunk], static[i : i + chunk], params)[0] for i in range(0, len(X), chunk)]
    return np.concatenate(out)


def batch_objective(params, X, static, labels, idx, pos_idx, loss: LossConfig, joint: bool = True):
    """Loss terms and parameter gradients for one batch.

    ``pos_idx`` is (N, K) positive indices per anchor, or None for no
    contrastive term.  Returns ``(focal, contrastive, combined, grads)``.
    Positives go through a separate forward pass with the same parameters, so
    their gradient contribution is simply added.
    """
    N = idx.size
    emb_a, prob_a, cache_a = encoder.forward_batch(X[idx], static[idx], params)
    if joint:
        focal = losses.focal_loss_mean(prob_a, labels[idx], loss.gamma)
        d_logit = losses.focal_grad_logit(prob_a, labels[idx], loss.gamma) / N
    else:
        focal, d_logit = 0.0, None

    contrastive = 0.0
    d_emb_a = cache_p = None
    if pos_idx is not None:
        flat = np.asarray(pos_idx).ravel()
        K = flat.size // N
        emb_p, _, cache_p = encoder.forward_batch(X[flat], static[flat], params)
        contrastive, dA, dP = losses.contrastive_loss_and_grad(
            emb_a, emb_p.reshape(N, K, -1), loss.tau, loss.normalize_embeddings
        )
        d_emb_a = loss.alpha * dA
        d_emb_p = loss.alpha * dP.reshape(N * K, -1)

    grads = encoder.backward(cache_a, d_embedding=d_emb_a, d_logit=d_logit)
    if cache_p is not None:
        grads_p = encoder.backward(cache_p, d_embedding=d_emb_p)
        for name in encoder.BLOCKS:
            grads[name] = grads[name] + grads_p[name]
    combined = losses.combined_loss(focal, contrastive, loss.alpha) if pos_idx is not None else focal
    return focal, contrastive, combined, grads


def train(records, config: TrainConfig, hook=None) -> TrainedModel:
    """Train an encoder on ``records``.

    ``hook(event, **info)`` is called with ``"graph_built"`` each time a kNN
    graph is (re)built.
    """
    config.validate()
    if not records:
        raise ValueError("empty training set")
    S, T, m = records[0].dims
    static, values, mask, labels = stack(records)
    if np.unique(labels).size < 2:
        raise ValueError("training set must contain both classes")
    cmean = encoder.channel_means(values, mask)
    X = encoder.impute(values, mask, cmean)
    n = len(records)
    K = config.loss.K
    joint = config.mode is Mode.JOINT
    strategy = config.strategy

    params = encoder.init_params(m, S, config.hidden, config.static_out, seed=config.seed)
    state = AdamState()
    index = sampling.ClassIndex(labels)
    singleton = {c for c, mem in index.members.items() if mem.size < 2}
    shuffle_rng = _rng(config.seed, 1)
    trace, builds = [], []
    blocks = list(params.arrays) if joint else [b for b in params.arrays if b not in encoder.HEAD_BLOCKS]
    graph_k = config.graph_k or K

    def notify(event, **info):
        if hook is not None:
            hook(event, **info)

    graph = None
    if strategy is Strategy.ATTRIBUTE:
        graph = attribute_graph(records, labels, config)
        builds.append(-1)
        notify("graph_built", epoch=-1, strategy=strategy, graph=graph)

    for epoch in range(config.epochs):
        if strategy is Strategy.FEATURE:
            graph = sampling.build_feature_knn(embed(params, X, static), labels, graph_k)
            builds.append(epoch)
            notify("graph_built", epoch=epoch, strategy=strategy, graph=graph)
        order = shuffle_rng.permutation(n)
        for b, sl in enumerate(batch_slices(n, config.batch_size)):
            idx = order[sl]
            if strategy is not None:
                rng = _rng(config.seed, 2, epoch, b)
                pos_idx = np.empty((idx.size, K), dtype=np.int64)
                for row, anchor in enumerate(idx):
                    if labels[anchor] in singleton:
                        pos_idx[row] = anchor
                    elif strategy is Strategy.RANDOM:
                        pos_idx[row] = sampling.sample_k_random(anchor, labels, K, rng, index)
                    else:
                        pos_idx[row] = sampling.sample_from_graph(anchor, graph, K, rng, index)
            else:
                pos_idx = None
            focal, contrastive, combined, grads = batch_objective(
                params, X, static, labels, idx, pos_idx, config.loss, joint
            )
            adam_step(
                params, grads, state, config.learning_rate,
                (config.beta1, config.beta2), config.adam_eps, blocks,
            )  # fmt: skip
            trace.append(TraceRow(epoch, b, focal, contrastive, combined))

    return TrainedModel(
        params=params,
        channel_mean=cmean,
        trace=trace,
        embeddings=embed(params, X, static),
        ids=np.array([r.id for r in records]),
        labels=labels,
        graph_builds=builds,
    )


def _arrays(model, records):
    S, _, m = check_dims(records)
    p = model.params
    if (S, m) != (p.S, p.m):
        raise ValueError(f"record dims (S={S}, m={m}) do not match model (S={p.S}, m={p.m})")
    X, static, _ = encoder.records_to_arrays(records, model.channel_mean)
    return X, static


def embed_records(model: TrainedModel, records) -> np.ndarray:
    return embed(model.params, *_arrays(model, records))


def predict(model: TrainedModel, records) -> np.ndarray:
    X, static = _arrays(model, records)
    out = [
        encoder.forward_batch(X[i : i + 1024], static[i : i + 1024], model.params)[1]
        for i in range(0, len(X), 1024)
    ]
    return np.concatenate(out)
