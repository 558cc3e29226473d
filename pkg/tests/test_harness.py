import json

import numpy as np
import pytest

from contrafocal import harness
from contrafocal.cli import main
from contrafocal.cohort import load_cohort
from contrafocal.harness import (
    Axis,
    ExperimentSpec,
    derive_seed,
    load_config,
    method_config,
    run_experiment,
    run_pretrain_eval,
    run_sweep,
    stratified_split,
    subsample_training,
)
from contrafocal.losses import LossConfig
from contrafocal.sampling import Strategy
from contrafocal.trainer import TrainConfig

TINY = """
[cohort]
n_patients = 90
positive_fraction = 0.3
n_subclusters_pos = 2
T = 3
m = 3
S = 2
missing_rate = 0.1
class_shift = 2.0

[train]
epochs = 1
batch_size = 16
hidden = 4
static_out = 4
k = 2

[experiment]
repetitions = 2
seed = 5
"""


def tiny_spec(**kw):
    spec = load_config(text=TINY)
    for k, v in kw.items():
        setattr(spec, k, v)
    spec.__post_init__()
    return spec


# config


def test_config_parsing():
    spec = load_config(text=TINY + "axis = tau\nvalues = 0.5, 1\nmethods = FL, FL-random\n")
    assert spec.cohort.n_patients == 90 and spec.cohort.T == 3
    assert spec.train.loss.K == 2 and spec.train.epochs == 1
    assert spec.axis is Axis.TAU and spec.values == [0.5, 1]
    assert spec.methods == ["FL", "FL-random"]
    assert spec.repetitions == 2 and spec.seed == 5


def test_config_from_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(TINY)
    assert load_config(path).as_dict() == load_config(text=TINY).as_dict()


@pytest.mark.parametrize(
    "axis,values",
    [("imbalance", harness.TABLE3_IMBALANCE), ("k", (1, 3, 5, 9, 11, 15)), ("alpha", (0.1, 0.2, 0.4, 0.6, 0.8)), ("tau", (0.1, 0.5, 1.0, 1.5))],
)
def test_axis_defaults(axis, values):
    assert load_config(text=f"[experiment]\naxis = {axis}\n").values == list(values)


@pytest.mark.parametrize(
    "text",
    ["[cohort]\nbogus = 1\n", "[train]\nbogus = 1\n", "[experiment]\nbogus = 1\n", "[train]\nstrategy = nearest\n"],
)
def test_config_rejects_unknown(text):
    with pytest.raises(ValueError):
        load_config(text=text)


def test_spec_validation():
    with pytest.raises(ValueError, match="imbalance"):
        ExperimentSpec(axis="imbalance", values=[1.5]).validate()
    with pytest.raises(ValueError, match="unknown methods"):
        ExperimentSpec(methods=["SVM"]).validate()
    with pytest.raises(ValueError, match="repetitions"):
        ExperimentSpec(repetitions=0).validate()
    with pytest.raises(ValueError, match="tau"):
        ExperimentSpec(axis="tau", values=[0.0]).validate()


def test_config_hash_tracks_content():
    a, b = tiny_spec(), tiny_spec()
    assert a.config_hash() == b.config_hash()
    b.repetitions = 3
    assert a.config_hash() != b.config_hash()


# seeds, splits, method configs


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "cohort", 1) == derive_seed(0, "cohort", 1)
    seeds = {derive_seed(0, "cohort", r) for r in range(50)} | {derive_seed(1, "cohort", 0), derive_seed(0, "split", 0)}
    assert len(seeds) == 52


def test_stratified_split():
    labels = np.array([1] * 30 + [0] * 70)
    tr, te = stratified_split(labels, 0.3, 4)
    assert te.size == 30 and labels[te].sum() == 9
    assert np.intersect1d(tr, te).size == 0 and np.union1d(tr, te).size == 100


@pytest.mark.parametrize("value", [0.01, 0.05, 0.1, 0.2])
def test_imbalance_subsample(value):
    labels = np.array([1] * 300 + [0] * 1000)
    train_idx = np.arange(0, 1300, 2)
    sub = subsample_training(train_idx, labels, Axis.IMBALANCE, value, seed=1)
    assert np.all(np.isin(sub, train_idx))
    assert (labels[sub] == 0).sum() == 500
    assert labels[sub].mean() == pytest.approx(value, abs=0.003)


def test_train_size_subsample():
    labels = np.array([1] * 300 + [0] * 700)
    train_idx = np.arange(1000)
    sub = subsample_training(train_idx, labels, Axis.TRAIN_SIZE, 200, seed=1)
    assert sub.size == 200 and labels[sub].sum() == 60
    assert subsample_training(train_idx, labels, Axis.K, 5, seed=1) is train_idx


def test_method_configs():
    base = TrainConfig(loss=LossConfig(gamma=2.0, K=5))
    ce = method_config(base, "CE", Axis.NONE, None, 3)
    assert ce.loss.gamma == 0.0 and ce.strategy is None and ce.seed == 3
    attr = method_config(base, "FL-attribute", Axis.K, 9, 3)
    assert attr.loss.K == 9 and attr.loss.gamma == 2.0 and attr.strategy is Strategy.ATTRIBUTE
    assert base.loss.K == 5  # the base config is not mutated
    assert method_config(base, "FL-random", Axis.ALPHA, 0.6, 0).loss.alpha == 0.6
    assert method_config(base, "FL-feature", Axis.TAU, 1.5, 0).loss.tau == 1.5


# grids


def test_two_method_grid_structure():
    report = run_experiment(tiny_spec(methods=["FL", "FL-random"]))
    rows = list(report.rows())
    assert len(rows) == 2 * 1 * 2
    for method, value, metric, mean, sd, failed in rows:
        assert np.isfinite(mean) and sd is not None and failed == 0
    assert len(report.runs) == 2 * 2
    csv = report.to_csv().splitlines()
    assert csv[0] == "method,axis,axis_value,metric,mean,sd,n_failed" and len(csv) == 5
    assert "FL-random" in report.to_table()


def test_single_repetition_has_no_sd():
    report = run_experiment(tiny_spec(methods=["FL"], repetitions=1))
    assert report.summary("FL", None, "auroc")[1] is None
    assert report.to_csv().splitlines()[1].split(",")[5] == ""


def test_rows_cover_methods_times_values():
    spec = tiny_spec(methods=["CE", "FL-feature"], axis="imbalance", values=[0.1, 0.2], repetitions=1)
    report = run_experiment(spec)
    assert len(list(report.rows())) == 2 * 2 * 2
    assert {(r.method, r.axis_value) for r in report.runs} == {(m, v) for m in spec.methods for v in spec.values}


def test_test_split_shared_and_training_subsampled(monkeypatch):
    seen = []

    def fake_predict(model, records):
        seen.append(tuple(r.id for r in records))
        return np.linspace(0, 1, len(records))

    monkeypatch.setattr(harness, "predict", fake_predict)
    spec = tiny_spec(methods=["CE", "FL"], axis="imbalance", values=[0.05, 0.2], repetitions=1)
    report = run_experiment(spec)
    assert len(seen) == 4 and len(set(seen)) == 1
    n_pos = {r.axis_value: r.n_train_pos for r in report.runs}
    assert n_pos[0.05] < n_pos[0.2]
    digests = [r["test_digest"] for r in report.provenance["repetitions"]]
    assert len(digests) == 1


def test_failed_cell_is_recorded(monkeypatch):
    real_train = harness.train

    def flaky(records, cfg):
        if cfg.strategy is Strategy.FEATURE:
            raise RuntimeError("boom")
        return real_train(records, cfg)

    monkeypatch.setattr(harness, "train", flaky)
    report = run_experiment(tiny_spec(methods=["FL", "FL-feature"], repetitions=1))
    status = {r.method: (r.status, r.diagnostic) for r in report.runs}
    assert status["FL"] == ("ok", "")
    assert status["FL-feature"] == ("failed", "RuntimeError: boom")
    assert report.to_csv().splitlines()[-1].endswith(",1")


def test_grid_reports_are_byte_identical(tmp_path):
    spec = tiny_spec(methods=["CE", "FL-attribute"])
    a = run_experiment(spec).write(tmp_path / "a")
    b = run_experiment(spec).write(tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes(), key
    prov = json.loads(a["provenance"].read_text())
    assert prov["master_seed"] == 5 and len(prov["repetitions"]) == 2


def test_pretrain_eval(tmp_path):
    spec = tiny_spec(methods=list(harness.CONTRASTIVE_METHODS), repetitions=2, out=str(tmp_path))
    report = run_pretrain_eval(spec)
    assert report.metric_names == ("probe_auroc", "ess", "sd_positive", "sd_negative")
    for m in spec.methods:
        for metric in report.metric_names:
            assert np.isfinite(report.summary(m, None, metric)[0])
    exported = sorted(p.name for p in tmp_path.glob("embeddings_*.csv"))
    assert len(exported) == 6 and "embeddings_FL-attribute_all_rep1.csv" in exported
    assert (tmp_path / "pretrain_report.csv").exists()
    with pytest.raises(ValueError, match="sampling strategies"):
        run_pretrain_eval(tiny_spec(methods=["FL"]))


def test_sweep_requires_parameter_axis():
    with pytest.raises(ValueError, match="k, alpha, tau"):
        run_sweep(tiny_spec())
    report = run_sweep(tiny_spec(methods=["FL-random"], axis="k", values=[1, 3], repetitions=1))
    assert [r.axis_value for r in report.runs] == [1, 3]


# CLI


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY + "methods = FL, FL-random\n")
    return str(path)


def test_cli_generate_train_evaluate(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert main(["generate", "--config", cfg_path, "--seed", "2", "--out", str(out)]) == 0
    records = load_cohort(out / "cohort.csv")
    assert len(records) == 90 and sum(r.label for r in records) == 27
    assert main(["train", "--config", cfg_path, "--data", str(out / "cohort.csv"), "--out", str(out)]) == 0
    for name in ("checkpoint.txt", "trace.csv", "embeddings.csv"):
        assert (out / name).exists()
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.txt"), "--data", str(out / "cohort.csv"), "--out", str(out / "eval")]) == 0
    lines = (out / "eval" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "metric,value" and lines[1].startswith("auroc,")
    assert "AUROC" in capsys.readouterr().out


@pytest.mark.parametrize("verb,extra", [("grid", ""), ("sweep", "axis = alpha\nvalues = 0.1\n"), ("pretrain-eval", "")])
def test_cli_grid_verbs(tmp_path, verb, extra, capsys):
    path = tmp_path / "c.ini"
    path.write_text(TINY.replace("repetitions = 2", "repetitions = 1") + "methods = FL-random\n" + extra)
    out = tmp_path / "o"
    assert main([verb, "--config", str(path), "--out", str(out)]) == 0
    kind = {"grid": "grid", "sweep": "sweep", "pretrain-eval": "pretrain"}[verb]
    assert (out / f"{kind}_report.csv").exists() and (out / f"{kind}_table.txt").exists()
    assert "FL-random" in capsys.readouterr().out


def test_cli_seed_override(tmp_path, cfg_path):
    for seed in ("1", "2"):
        main(["generate", "--config", cfg_path, "--seed", seed, "--out", str(tmp_path / seed)])
    assert (tmp_path / "1" / "cohort.csv").read_bytes() != (tmp_path / "2" / "cohort.csv").read_bytes()
    header = (tmp_path / "1" / "cohort.csv").read_text().splitlines()[0]
    assert header.endswith("seed=1")


def test_cli_requires_verb():
    with pytest.raises(SystemExit):
        main([])
