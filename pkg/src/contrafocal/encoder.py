"""Gated recurrent encoder over binned longitudinal features plus a static layer.

The patient embedding is ``[h_T, tanh(static @ Ws + bs)]``; a logistic head on
top of it gives the outcome probability.  Forward and backward passes are
written out by hand and operate on whole batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .cohort import PatientRecord, stack

CHECKPOINT_MAGIC = "contrafocal-checkpoint"
CHECKPOINT_VERSION = 1

GRU_BLOCKS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")
STATIC_BLOCKS = ("Ws", "bs")
HEAD_BLOCKS = ("w_head", "b_head")
BLOCKS = GRU_BLOCKS + STATIC_BLOCKS + HEAD_BLOCKS


def bin_longitudinal(events, window_hours: float, n_bins: int, n_channels: int):
    """Average timestamped measurements into fixed windows.

    ``events`` is an iterable of ``(time_hours, channel, value)``.  Bin ``t``
    covers ``[t*w, (t+1)*w)``; empty bins come back masked.
    """
    if window_hours <= 0:
        raise ValueError("window_hours must be > 0")
    ev = np.asarray(list(events), dtype=np.float64).reshape(-1, 3)
    times, chans, vals = ev[:, 0], ev[:, 1].astype(np.int64), ev[:, 2]
    if np.any(times < 0):
        raise ValueError("negative timestamp in events")
    bins = np.floor(times / window_hours).astype(np.int64)
    if np.any(bins >= n_bins):
        raise ValueError(f"timestamp beyond horizon of {n_bins * window_hours} hours")
    if np.any((chans < 0) | (chans >= n_channels)):
        raise ValueError("channel index out of range")
    sums = np.zeros((n_bins, n_channels))
    counts = np.zeros((n_bins, n_channels), dtype=np.int64)
    np.add.at(sums, (bins, chans), vals)
    np.add.at(counts, (bins, chans), 1)
    mask = counts > 0
    matrix = np.full((n_bins, n_channels), np.nan)
    matrix[mask] = sums[mask] / counts[mask]
    return matrix, mask


def impute(values, mask, channel_means=None) -> np.ndarray:
    """Forward-fill along time, then channel mean, then zero.

    Works on a single ``(T, m)`` matrix or a stacked ``(n, T, m)`` array.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, values, np.nan)
    T = out.shape[-2]
    for t in range(1, T):
        prev = out[..., t - 1, :]
        cur = out[..., t, :]
        out[..., t, :] = np.where(np.isnan(cur), prev, cur)
    fill = np.zeros(out.shape[-1]) if channel_means is None else np.asarray(channel_means, float)
    fill = np.where(np.isnan(fill), 0.0, fill)
    return np.where(np.isnan(out), fill, out)


def channel_means(values, mask) -> np.ndarray:
    """Per-channel mean over observed cells of an (n, T, m) array; NaN if never observed."""
    obs = np.asarray(mask, dtype=bool)
    total = np.where(obs, values, 0.0).sum(axis=(0, 1))
    count = obs.sum(axis=(0, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


@dataclass
class ModelParams:
    m: int
    S: int
    H: int = 50
    P: int = 50
    arrays: dict = field(default_factory=dict)
    version: int = 0

    @property
    def D(self) -> int:
        return self.H + self.P

    def shapes(self) -> dict:
        m, S, H, P = self.m, self.S, self.H, self.P
        return {
            "Wz": (m, H), "Uz": (H, H), "bz": (H,),
            "Wr": (m, H), "Ur": (H, H), "br": (H,),
            "Wh": (m, H), "Uh": (H, H), "bh": (H,),
            "Ws": (S, P), "bs": (P,),
            "w_head": (H + P,), "b_head": (1,),
        }  # fmt: skip

    def __getitem__(self, name):
        return self.arrays[name]

    def validate(self) -> None:
        shapes = self.shapes()
        if set(self.arrays) != set(shapes):
            raise ValueError(f"parameter blocks {sorted(self.arrays)} != {sorted(shapes)}")
        for name, shape in shapes.items():
            a = self.arrays[name]
            if a.shape != shape:
                raise ValueError(f"{name}: shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite entries")

    def copy(self) -> ModelParams:
        return ModelParams(self.m, self.S, self.H, self.P, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in BLOCKS])

    @classmethod
    def from_flat(cls, m, S, H, P, flat) -> ModelParams:
        p = cls(m, S, H, P)
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for name in BLOCKS:
            shape = p.shapes()[name]
            size = int(np.prod(shape))
            p.arrays[name] = flat[offset : offset + size].reshape(shape).copy()
            offset += size
        if offset != flat.size:
            raise ValueError(f"flat array has {flat.size} values, expected {offset}")
        return p


def init_params(m: int, S: int, H: int = 50, P: int = 50, seed: int = 0) -> ModelParams:
    """Matrices ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    rng = np.random.default_rng(seed)
    params = ModelParams(m, S, H, P)
    for name in BLOCKS:
        shape = params.shapes()[name]
        if len(shape) == 2 or name == "w_head":
            bound = 1.0 / np.sqrt(shape[0])
            params.arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params.arrays[name] = np.zeros(shape)
    return params


def zero_params(m: int, S: int, H: int = 50, P: int = 50) -> ModelParams:
    p = ModelParams(m, S, H, P)
    p.arrays = {k: np.zeros(s) for k, s in p.shapes().items()}
    return p


@dataclass
class ForwardCache:
    params: ModelParams
    version: int
    X: np.ndarray
    static: np.ndarray
    hs: list
    zs: list
    rs: list
    hcs: list
    s_out: np.ndarray
    emb: np.ndarray
    prob: np.ndarray


def forward_batch(X, static, params: ModelParams):
    """Encode a batch.

    X: (B, T, m) imputed series; static: (B, S).
    Returns (embeddings (B, D), probabilities (B,), cache).
    """
    X = np.asarray(X, dtype=np.float64)
    static = np.asarray(static, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != params.m:
        raise ValueError(f"longitudinal input shape {X.shape} does not match m={params.m}")
    if static.shape != (X.shape[0], params.S):
        raise ValueError(f"static input shape {static.shape} does not match S={params.S}")
    a = params.arrays
    B, T, _ = X.shape
    h = np.zeros((B, params.H))
    hs, zs, rs, hcs = [h], [], [], []
    for t in range(T):
        x = X[:, t, :]
        z = expit(x @ a["Wz"] + h @ a["Uz"] + a["bz"])
        r = expit(x @ a["Wr"] + h @ a["Ur"] + a["br"])
        hc = np.tanh(x @ a["Wh"] + (r * h) @ a["Uh"] + a["bh"])
        h = (1.0 - z) * h + z * hc
        hs.append(h)
        zs.append(z)
        rs.append(r)
        hcs.append(hc)
    s_out = np.tanh(static @ a["Ws"] + a["bs"])
    emb = np.concatenate([h, s_out], axis=1)
    prob = expit(emb @ a["w_head"] + a["b_head"][0])
    cache = ForwardCache(params, params.version, X, static, hs, zs, rs, hcs, s_out, emb, prob)
    return emb, prob, cache


def backward(cache: ForwardCache, d_embedding=None, d_prob=None, d_logit=None) -> dict:
    """Reverse-mode gradients of a scalar loss given its upstream gradients.

    Upstream terms may be given w.r.t. the embedding, the probability, and/or
    the head logit; they are summed.
    """
    params = cache.params
    if params.version != cache.version:
        raise ValueError("stale cache: parameters changed since the forward pass")
    a = params.arrays
    B = cache.X.shape[0]
    H = params.H

    dlogit = np.zeros(B)
    if d_logit is not None:
        dlogit = dlogit + np.asarray(d_logit, dtype=np.float64).reshape(B)
    if d_prob is not None:
        p = cache.prob
        dlogit = dlogit + np.asarray(d_prob, dtype=np.float64).reshape(B) * p * (1.0 - p)

    grads = {}
    grads["w_head"] = cache.emb.T @ dlogit
    grads["b_head"] = np.array([dlogit.sum()])
    demb = np.outer(dlogit, a["w_head"])
    if d_embedding is not None:
        d_embedding = np.asarray(d_embedding, dtype=np.float64)
        if d_embedding.shape != cache.emb.shape:
            raise ValueError(f"d_embedding shape {d_embedding.shape} != {cache.emb.shape}")
        demb = demb + d_embedding

    ds = demb[:, H:] * (1.0 - cache.s_out**2)
    grads["Ws"] = cache.static.T @ ds
    grads["bs"] = ds.sum(axis=0)

    for name in GRU_BLOCKS:
        grads[name] = np.zeros_like(a[name])
    dh = demb[:, :H].copy()
    for t in reversed(range(cache.X.shape[1])):
        x = cache.X[:, t, :]
        h_prev = cache.hs[t]
        z, r, hc = cache.zs[t], cache.rs[t], cache.hcs[t]
        dhc = dh * z
        dz = dh * (hc - h_prev)
        dh_prev = dh * (1.0 - z)

        dah = dhc * (1.0 - hc * hc)
        rh = r * h_prev
        grads["Wh"] += x.T @ dah
        grads["Uh"] += rh.T @ dah
        grads["bh"] += dah.sum(axis=0)
        drh = dah @ a["Uh"].T
        dr = drh * h_prev
        dh_prev += drh * r

        daz = dz * z * (1.0 - z)
        grads["Wz"] += x.T @ daz
        grads["Uz"] += h_prev.T @ daz
        grads["bz"] += daz.sum(axis=0)
        dh_prev += daz @ a["Uz"].T

        dar = dr * r * (1.0 - r)
        grads["Wr"] += x.T @ dar
        grads["Ur"] += h_prev.T @ dar
        grads["br"] += dar.sum(axis=0)
        dh_prev += dar @ a["Ur"].T
        dh = dh_prev
    grads["d_embedding"] = demb
    return grads


def records_to_arrays(records, channel_mean=None):
    """Impute and stack records: (X (n,T,m), static (n,S), labels (n,))."""
    static, values, mask, labels = stack(records)
    return impute(values, mask, channel_mean), static, labels


def forward(record: PatientRecord, params: ModelParams, channel_mean=None):
    """Single-record forward pass: (embedding (D,), probability, cache)."""
    S, T, m = record.dims
    if (S, m) != (params.S, params.m):
        raise ValueError(f"record dims (S={S}, m={m}) do not match params (S={params.S}, m={params.m})")
    X = impute(record.values, record.mask, channel_mean)[None]
    emb, prob, cache = forward_batch(X, record.static[None], params)
    return emb[0], float(prob[0]), cache


def save_checkpoint(params: ModelParams, path, channel_mean=None) -> None:
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"m={params.m} S={params.S} H={params.H} P={params.P}",
    ]
    cm = np.full(params.m, np.nan) if channel_mean is None else np.asarray(channel_mean, float)
    lines.append("channel_mean " + " ".join(repr(float(v)) for v in cm))
    lines.extend(repr(float(v)) for v in params.flat())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Return (params, channel_mean)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    magic, _, version = lines[0].partition(" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dims = dict(part.split("=") for part in lines[1].split())
    m, S, H, P = (int(dims[k]) for k in ("m", "S", "H", "P"))
    cm = np.array([float(v) for v in lines[2].split()[1:]])
    params = ModelParams.from_flat(m, S, H, P, [float(v) for v in lines[3:]])
    params.validate()
    return params, cm
