"""Experiment grids over methods x axis values x seeded repetitions.

Every repetition draws a fresh cohort and a stratified 70/30 split.  The test
side is shared by all methods and axis values of that repetition; axes that
change the training data only ever subsample the training side.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.model_selection import train_test_split

from . import __version__, metrics
from .cohort import CohortSpec, generate_cohort
from .losses import LossConfig
from .sampling import Strategy
from .trainer import Mode, TrainConfig, embed_records, predict, train

logger = logging.getLogger(__name__)


class Axis(str, enum.Enum):
    NONE = "none"
    TRAIN_SIZE = "train_size"
    IMBALANCE = "imbalance"
    K = "k"
    ALPHA = "alpha"
    TAU = "tau"


# method -> (focal gamma override, sampling strategy); None keeps the config gamma
METHODS = {
    "CE": (0.0, None),
    "FL": (None, None),
    "FL-random": (None, Strategy.RANDOM),
    "FL-feature": (None, Strategy.FEATURE),
    "FL-attribute": (None, Strategy.ATTRIBUTE),
}
CONTRASTIVE_METHODS = ("FL-random", "FL-feature", "FL-attribute")
CLASSIFICATION_METRICS = ("auroc", "auprc")
EMBEDDING_METRICS = ("probe_auroc", "ess", "sd_positive", "sd_negative")

# reference grids
TABLE3_IMBALANCE = (0.01, 0.05, 0.10, 0.15, 0.20)
TABLE2_TRAIN_SIZES = (399, 999, 1999, 2999, 3999)
SWEEP_VALUES = {
    Axis.K: (1, 3, 5, 9, 11, 15),
    Axis.ALPHA: (0.1, 0.2, 0.4, 0.6, 0.8),
    Axis.TAU: (0.1, 0.5, 1.0, 1.5),
}


@dataclass
class ExperimentSpec:
    cohort: CohortSpec = field(default_factory=CohortSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    axis: Axis = Axis.NONE
    values: list = field(default_factory=lambda: [None])
    methods: list = field(default_factory=lambda: list(METHODS))
    repetitions: int = 7
    seed: int = 0
    test_fraction: float = 0.3
    out: str | None = None

    def __post_init__(self):
        self.axis = Axis(self.axis)
        if self.axis is Axis.NONE:
            self.values = [None]

    def validate(self) -> None:
        self.cohort.validate()
        self.train.validate()
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if not self.values:
            raise ValueError("axis values must be nonempty")
        for v in self.values:
            if self.axis is Axis.IMBALANCE and not 0.0 < v < 1.0:
                raise ValueError(f"imbalance value {v} outside (0, 1)")
            if self.axis is Axis.TRAIN_SIZE and int(v) < 2:
                raise ValueError(f"train size {v} too small")
            if self.axis is Axis.K and int(v) < 1:
                raise ValueError(f"K value {v} must be >= 1")
            if self.axis is Axis.ALPHA and v < 0:
                raise ValueError(f"alpha value {v} must be >= 0")
            if self.axis is Axis.TAU and v <= 0:
                raise ValueError(f"tau value {v} must be > 0")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out")
        return json.loads(json.dumps(d, default=_jsonable))

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, enum.Enum):
        return o.value
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")


def derive_seed(master: int, *parts) -> int:
    """Stable 32-bit seed from the master seed and a tuple of labels."""
    words = [int(master)]
    for p in parts:
        words.append(zlib.crc32(repr(p).encode()))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def stratified_split(labels, test_fraction: float, seed: int):
    idx = np.arange(len(labels))
    train_idx, test_idx = train_test_split(
        idx, test_size=test_fraction, stratify=labels, random_state=seed, shuffle=True
    )
    return np.sort(train_idx), np.sort(test_idx)


def subsample_training(train_idx, labels, axis: Axis, value, seed: int) -> np.ndarray:
    """Training-side subset for the size/imbalance axes; other axes pass through."""
    rng = np.random.default_rng(seed)
    y = labels[train_idx]
    pos, neg = train_idx[y == 1], train_idx[y == 0]
    if axis is Axis.TRAIN_SIZE:
        size = int(value)
        if size >= train_idx.size:
            return train_idx
        keep, _ = train_test_split(train_idx, train_size=size, stratify=y, random_state=seed)
        return np.sort(keep)
    if axis is Axis.IMBALANCE:
        # keep every negative and restrict positives, unless positives run short
        n_pos = int(round(value * neg.size / (1.0 - value)))
        if n_pos <= pos.size:
            chosen_pos = rng.choice(pos, size=max(n_pos, 1), replace=False)
            return np.sort(np.concatenate([neg, chosen_pos]))
        n_neg = int(round(pos.size * (1.0 - value) / value))
        chosen_neg = rng.choice(neg, size=n_neg, replace=False)
        return np.sort(np.concatenate([chosen_neg, pos]))
    return train_idx


def method_config(base: TrainConfig, method: str, axis: Axis, value, seed: int, mode=Mode.JOINT):
    gamma, strategy = METHODS[method]
    loss = replace(base.loss)
    if gamma is not None:
        loss.gamma = gamma
    if axis is Axis.K:
        loss.K = int(value)
    elif axis is Axis.ALPHA:
        loss.alpha = float(value)
    elif axis is Axis.TAU:
        loss.tau = float(value)
    return replace(base, loss=loss, strategy=strategy, mode=mode, seed=seed)


@dataclass
class RunResult:
    method: str
    axis_value: object
    repetition: int
    seed: int
    n_train: int
    n_train_pos: int
    status: str = "ok"
    diagnostic: str = ""
    metrics: dict = field(default_factory=dict)


@dataclass
class GridReport:
    kind: str
    axis: Axis
    values: list
    methods: list
    metric_names: tuple
    runs: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def cell(self, method, value) -> list:
        return [r for r in self.runs if r.method == method and r.axis_value == value]

    def values_of(self, method, value, metric) -> np.ndarray:
        runs = sorted(self.cell(method, value), key=lambda r: r.repetition)
        return np.array([r.metrics[metric] for r in runs if r.status == "ok"])

    def summary(self, method, value, metric) -> tuple[float, float | None]:
        v = self.values_of(method, value, metric)
        if v.size == 0:
            return math.nan, None
        sd = float(np.std(v, ddof=1)) if v.size >= 2 else None
        return float(v.mean()), sd

    def rows(self):
        for method in self.methods:
            for value in self.values:
                failed = sum(r.status != "ok" for r in self.cell(method, value))
                for metric in self.metric_names:
                    mean, sd = self.summary(method, value, metric)
                    yield method, value, metric, mean, sd, failed

    def to_csv(self) -> str:
        lines = ["method,axis,axis_value,metric,mean,sd,n_failed"]
        for method, value, metric, mean, sd, failed in self.rows():
            lines.append(
                f"{method},{self.axis.value},{_fmt_value(value)},{metric},{mean!r},"
                f"{'' if sd is None else repr(sd)},{failed}"
            )
        return "\n".join(lines) + "\n"

    def runs_csv(self) -> str:
        head = "method,axis_value,repetition,seed,n_train,n_train_pos,status," + ",".join(self.metric_names)
        lines = [head + ",diagnostic"]
        for r in self.runs:
            vals = [repr(r.metrics.get(k, math.nan)) for k in self.metric_names]
            lines.append(
                ",".join(
                    [r.method, _fmt_value(r.axis_value), str(r.repetition), str(r.seed),
                     str(r.n_train), str(r.n_train_pos), r.status, *vals, r.diagnostic.replace(",", ";")]
                )
            )  # fmt: skip
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Fixed-width table: one block per metric, cells as mean(sd)."""
        out = []
        header = ["method"] + [_fmt_value(v) if v is not None else "all" for v in self.values]
        for metric in self.metric_names:
            out.append(f"[{metric}]  axis={self.axis.value}")
            rows = [header]
            for method in self.methods:
                row = [method]
                for value in self.values:
                    mean, sd = self.summary(method, value, metric)
                    row.append(f"{mean:.3f}" if sd is None else f"{mean:.3f}({sd:.3f})")
                rows.append(row)
            widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
            out += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
            out.append("")
        out.append("provenance: " + json.dumps(self.provenance, sort_keys=True))
        return "\n".join(out) + "\n"

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": out / f"{self.kind}_report.csv",
            "runs": out / f"{self.kind}_runs.csv",
            "table": out / f"{self.kind}_table.txt",
            "provenance": out / f"{self.kind}_provenance.json",
        }
        paths["report"].write_text(self.to_csv(), encoding="utf-8")
        paths["runs"].write_text(self.runs_csv(), encoding="utf-8")
        paths["table"].write_text(self.to_table(), encoding="utf-8")
        paths["provenance"].write_text(json.dumps(self.provenance, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return paths


def _fmt_value(v) -> str:
    return "" if v is None else str(v)


def _digest(ids) -> str:
    return hashlib.sha256(np.asarray(ids, dtype=np.int64).tobytes()).hexdigest()[:16]


def _run_grid(spec: ExperimentSpec, kind: str, pretrain: bool, export_dir=None) -> GridReport:
    spec.validate()
    metric_names = EMBEDDING_METRICS if pretrain else CLASSIFICATION_METRICS
    report = GridReport(kind, spec.axis, list(spec.values), list(spec.methods), metric_names)
    prov = {
        "code_version": __version__,
        "config_hash": spec.config_hash(),
        "master_seed": spec.seed,
        "repetitions": [],
    }
    for rep in range(spec.repetitions):
        cohort_seed = derive_seed(spec.seed, "cohort", rep)
        split_seed = derive_seed(spec.seed, "split", rep)
        records = generate_cohort(replace(spec.cohort, seed=cohort_seed))
        labels = np.array([r.label for r in records])
        train_idx, test_idx = stratified_split(labels, spec.test_fraction, split_seed)
        test = [records[i] for i in test_idx]
        test_labels = labels[test_idx]
        prov["repetitions"].append(
            {"repetition": rep, "cohort_seed": cohort_seed, "split_seed": split_seed,
             "test_digest": _digest(test_idx), "n_test": int(test_idx.size)}
        )  # fmt: skip
        for value in spec.values:
            sub_seed = derive_seed(spec.seed, "subsample", value, rep)
            sub_idx = subsample_training(train_idx, labels, spec.axis, value, sub_seed)
            train_set = [records[i] for i in sub_idx]
            # shared across methods so comparisons within a cell are paired
            init_seed = derive_seed(spec.seed, "init", value, rep)
            for method in spec.methods:
                run = RunResult(method, value, rep, init_seed, len(train_set), int(labels[sub_idx].sum()))
                cfg = method_config(
                    spec.train, method, spec.axis, value, init_seed, Mode.PRETRAIN if pretrain else Mode.JOINT
                )
                try:
                    model = train(train_set, cfg)
                    if pretrain:
                        test_emb = embed_records(model, test)
                        rep_metrics = metrics.embedding_report(model.embeddings, model.labels, test_emb, test_labels)
                        if export_dir is not None:
                            name = f"embeddings_{method}_{_fmt_value(value) or 'all'}_rep{rep}.csv"
                            metrics.export_embeddings(Path(export_dir) / name, [r.id for r in test], test_labels, test_emb)
                    else:
                        rep_metrics = metrics.classification_report(predict(model, test), test_labels)
                    rep_metrics.validate(required=metric_names)
                    run.metrics = {k: rep_metrics.as_dict()[k] for k in metric_names}
                except Exception as exc:  # a failed cell must not stop the grid
                    logger.exception("run failed: %s value=%s rep=%d", method, value, rep)
                    run.status = "failed"
                    run.diagnostic = f"{type(exc).__name__}: {exc}"
                report.runs.append(run)
                logger.info("%s %s=%s rep=%d %s", method, spec.axis.value, value, rep, run.metrics)
    report.provenance = prov
    if spec.out is not None:
        report.write(spec.out)
    return report


def run_experiment(spec: ExperimentSpec) -> GridReport:
    return _run_grid(spec, "grid", pretrain=False)


def run_pretrain_eval(spec: ExperimentSpec, export: bool = True) -> GridReport:
    bad = [m for m in spec.methods if METHODS[m][1] is None]
    if bad:
        raise ValueError(f"pretrain-eval needs sampling strategies, got {bad}")
    export_dir = None
    if export and spec.out is not None:
        export_dir = Path(spec.out)
        export_dir.mkdir(parents=True, exist_ok=True)
    return _run_grid(spec, "pretrain", pretrain=True, export_dir=export_dir)


def run_sweep(spec: ExperimentSpec) -> GridReport:
    if spec.axis not in (Axis.K, Axis.ALPHA, Axis.TAU):
        raise ValueError("a sweep varies exactly one of k, alpha, tau")
    return _run_grid(spec, "sweep", pretrain=False)


# ---------------------------------------------------------------- config files


def _coerce(text: str, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_config(path=None, text: str | None = None) -> ExperimentSpec:
    """Read an ``ExperimentSpec`` from an INI-style key = value file.

    Sections: ``[cohort]`` (CohortSpec fields), ``[train]`` (TrainConfig and
    LossConfig fields, plus ``strategy``), ``[experiment]`` (axis, values,
    methods, repetitions, seed, test_fraction).
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep T, S, K as written
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    if text is not None:
        cp.read_string(text)

    cohort = CohortSpec()
    if cp.has_section("cohort"):
        for key, raw in cp.items("cohort"):
            if not hasattr(cohort, key):
                raise ValueError(f"[cohort] unknown key {key!r}")
            setattr(cohort, key, _coerce(raw, getattr(cohort, key)))

    loss = LossConfig()
    train_cfg = TrainConfig(loss=loss)
    if cp.has_section("train"):
        for key, raw in cp.items("train"):
            if key in ("k", "K"):
                loss.K = int(raw)
            elif hasattr(loss, key):
                setattr(loss, key, _coerce(raw, getattr(loss, key)))
            elif key == "strategy":
                train_cfg.strategy = None if raw.strip().lower() in ("", "none") else Strategy(raw.strip())
            elif key == "mode":
                train_cfg.mode = Mode(raw.strip())
            elif key == "graph_k":
                train_cfg.graph_k = int(raw)
            elif hasattr(train_cfg, key):
                setattr(train_cfg, key, _coerce(raw, getattr(train_cfg, key)))
            else:
                raise ValueError(f"[train] unknown key {key!r}")

    kwargs = {}
    if cp.has_section("experiment"):
        ex = dict(cp.items("experiment"))
        if "axis" in ex:
            kwargs["axis"] = Axis(ex.pop("axis").strip().lower())
        if "values" in ex:
            kwargs["values"] = [_parse_value(v) for v in ex.pop("values").split(",") if v.strip()]
        if "methods" in ex:
            kwargs["methods"] = [m.strip() for m in ex.pop("methods").split(",") if m.strip()]
        for key in ("repetitions", "seed"):
            if key in ex:
                kwargs[key] = int(ex.pop(key))
        if "test_fraction" in ex:
            kwargs["test_fraction"] = float(ex.pop("test_fraction"))
        if ex:
            raise ValueError(f"[experiment] unknown keys {sorted(ex)}")
    axis = kwargs.get("axis", Axis.NONE)
    if axis is not Axis.NONE and "values" not in kwargs:
        kwargs["values"] = list(TABLE3_IMBALANCE if axis is Axis.IMBALANCE else
                                TABLE2_TRAIN_SIZES if axis is Axis.TRAIN_SIZE else SWEEP_VALUES[axis])  # fmt: skip
    return ExperimentSpec(cohort=cohort, train=train_cfg, **kwargs)
