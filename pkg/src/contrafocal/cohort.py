"""Synthetic longitudinal cohorts and the plain-text dataset format.

Positive patients are split round-robin into latent subclusters whose centers
are offset from a shared positive center by isotropic Gaussian draws scaled by
``subcluster_separation``.  Negatives come from one broad distribution.  Each
channel follows a per-patient linear trend plus per-bin noise, and cells are
dropped independently at ``missing_rate``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MISSING = np.nan
NA_TOKEN = "NA"


class CohortFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


@dataclass
class PatientRecord:
    id: int
    static: np.ndarray  # (S,)
    values: np.ndarray  # (T, m), NaN where masked
    mask: np.ndarray  # (T, m) bool, True = observed
    label: int

    def __post_init__(self):
        self.static = np.asarray(self.static, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise ValueError(f"record {self.id}: values/mask must share a (T, m) shape")
        if self.static.ndim != 1 or self.static.size < 1:
            raise ValueError(f"record {self.id}: static features must be a nonempty vector")
        if min(self.values.shape) < 1:
            raise ValueError(f"record {self.id}: T and m must be >= 1")
        if self.label not in (0, 1):
            raise ValueError(f"record {self.id}: label must be 0 or 1, got {self.label!r}")
        # masked cells hold the sentinel, never a value
        self.values = np.where(self.mask, self.values, MISSING)

    @property
    def dims(self) -> tuple[int, int, int]:
        T, m = self.values.shape
        return self.static.size, T, m

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.static, other.static)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass
class CohortSpec:
    n_patients: int = 5712
    positive_fraction: float = 0.23
    n_subclusters_pos: int = 4
    subcluster_separation: float = 0.8
    missing_rate: float = 0.5
    T: int = 8
    m: int = 10
    S: int = 6
    seed: int = 0
    # generative knobs beyond the core fields
    class_shift: float = 0.5
    negative_spread: float = 1.0
    positive_spread: float = 0.7
    trend_scale: float = 1.0
    noise: float = 1.0

    def validate(self) -> None:
        errors = []
        for name in ("n_patients", "T", "m", "S", "n_subclusters_pos"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name} must be >= 1")
        if not 0.0 < self.positive_fraction < 1.0:
            errors.append("positive_fraction must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            errors.append("missing_rate must lie in [0, 1)")
        if self.subcluster_separation < 0:
            errors.append("subcluster_separation must be >= 0")
        for name in ("negative_spread", "positive_spread", "noise", "trend_scale"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if not errors and self.positive_fraction * self.n_patients < self.n_subclusters_pos:
            errors.append("positive_fraction * n_patients must be >= n_subclusters_pos")
        if errors:
            raise ValueError("invalid CohortSpec: " + "; ".join(errors))

    @property
    def n_positive(self) -> int:
        return int(round(self.positive_fraction * self.n_patients))


def latent_groups(labels, n_subclusters: int) -> np.ndarray:
    """Round-robin subcluster index per positive (in id order); -1 for negatives."""
    labels = np.asarray(labels)
    groups = np.full(labels.shape, -1, dtype=np.int64)
    pos = np.flatnonzero(labels == 1)
    groups[pos] = np.arange(pos.size) % n_subclusters
    return groups


def latent_centers(spec: CohortSpec) -> dict:
    """Positive subcluster centers for static features, channel levels and slopes."""
    rng = np.random.default_rng([spec.seed, 1])
    c, sep = spec.n_subclusters_pos, spec.subcluster_separation
    out = {}
    for name, dim in (("static", spec.S), ("level", spec.m), ("slope", spec.m)):
        # shared positive direction, then per-subcluster isotropic offsets
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        out[name] = spec.class_shift * direction + sep * rng.standard_normal((c, dim))
    return out


def generate_cohort(spec: CohortSpec) -> list[PatientRecord]:
    spec.validate()
    n, T, m, S = spec.n_patients, spec.T, spec.m, spec.S
    centers = latent_centers(spec)
    rng = np.random.default_rng([spec.seed, 2])

    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[: spec.n_positive]] = 1
    groups = latent_groups(labels, spec.n_subclusters_pos)

    is_pos = labels == 1
    spread = np.where(is_pos, spec.positive_spread, spec.negative_spread)[:, None]
    static = rng.standard_normal((n, S)) * spread
    level = rng.standard_normal((n, m)) * spread
    slope = rng.standard_normal((n, m)) * spread
    static[is_pos] += centers["static"][groups[is_pos]]
    level[is_pos] += centers["level"][groups[is_pos]]
    slope[is_pos] += centers["slope"][groups[is_pos]]

    # time runs over [-0.5, 0.5] so the level is the series mean
    tgrid = (np.arange(T) / max(T - 1, 1) - 0.5) if T > 1 else np.zeros(1)
    values = (
        level[:, None, :]
        + spec.trend_scale * slope[:, None, :] * tgrid[None, :, None]
        + spec.noise * rng.standard_normal((n, T, m))
    )
    mask = rng.random((n, T, m)) >= spec.missing_rate

    return [
        PatientRecord(id=i, static=static[i], values=values[i], mask=mask[i], label=int(labels[i]))
        for i in range(n)
    ]


def check_dims(records) -> tuple[int, int, int]:
    if not records:
        raise ValueError("empty cohort")
    dims = records[0].dims
    for r in records:
        if r.dims != dims:
            raise ValueError(f"record {r.id} has dims {r.dims}, expected {dims} (S, T, m)")
    return dims


def stack(records) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (static (n,S), values (n,T,m), mask (n,T,m), labels (n,))."""
    check_dims(records)
    static = np.stack([r.static for r in records])
    values = np.stack([r.values for r in records])
    mask = np.stack([r.mask for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    return static, values, mask, labels


def _fmt(x: float) -> str:
    return repr(float(x))


def save_cohort(records, path, *, seed: int | None = None) -> None:
    S, T, m = check_dims(records)
    lines = [f"n={len(records)},S={S},T={T},m={m},seed={'' if seed is None else seed}"]
    for r in records:
        cells = [str(r.id), str(r.label)]
        cells += [_fmt(v) for v in r.static]
        flat_v = r.values.ravel()
        flat_m = r.mask.ravel()
        cells += [_fmt(v) if ok else NA_TOKEN for v, ok in zip(flat_v, flat_m)]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> dict:
    try:
        fields = dict(part.split("=", 1) for part in line.strip().split(","))
        header = {k: int(fields[k]) for k in ("n", "S", "T", "m")}
    except (ValueError, KeyError) as exc:
        raise CohortFormatError(f"line 1: malformed header {line.strip()!r}") from exc
    seed = fields.get("seed", "")
    header["seed"] = int(seed) if seed else None
    return header


def load_cohort(path, *, with_meta: bool = False):
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise CohortFormatError("line 1: empty file")
    header = _parse_header(text[0])
    S, T, m = header["S"], header["T"], header["m"]
    width = 2 + S + T * m
    records = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise ValueError(
                f"line {lineno}: expected {width} fields for dims (S={S}, T={T}, m={m}), got {len(cells)}"
            )
        try:
            rid = int(cells[0])
            label = int(cells[1])
        except ValueError as exc:
            raise CohortFormatError(f"line {lineno}: bad id/label field") from exc
        nums = np.empty(S + T * m)
        observed = np.ones(S + T * m, dtype=bool)
        for j, cell in enumerate(cells[2:]):
            if cell == NA_TOKEN and j >= S:
                nums[j] = MISSING
                observed[j] = False
                continue
            try:
                nums[j] = float(cell)
            except ValueError:
                raise CohortFormatError(
                    f"line {lineno}, field {j + 3}: non-numeric cell {cell!r}"
                ) from None
        records.append(
            PatientRecord(
                id=rid,
                static=nums[:S],
                values=nums[S:].reshape(T, m),
                mask=observed[S:].reshape(T, m),
                label=label,
            )
        )
    if len(records) != header["n"]:
        raise ValueError(f"header declares n={header['n']} but file holds {len(records)} records")
    if with_meta:
        return records, header
    return records


def patient_attributes(records) -> tuple[np.ndarray, np.ndarray]:
    """Per-patient channel means over observed bins: (n, m) values and observed mask."""
    _, values, mask, _ = stack(records)
    counts = mask.sum(axis=1)
    sums = np.where(mask, values, 0.0).sum(axis=1)
    observed = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(observed, sums / np.maximum(counts, 1), MISSING)
    return means, observed

