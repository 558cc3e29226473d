import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrafocal.cohort import (
    CohortFormatError,
    CohortSpec,
    PatientRecord,
    generate_cohort,
    latent_centers,
    latent_groups,
    load_cohort,
    patient_attributes,
    save_cohort,
    stack,
)

from oracles import silhouette_bruteforce


def small(**kw):
    base = dict(n_patients=60, T=3, m=4, S=2, seed=3)
    base.update(kw)
    return CohortSpec(**base)


def test_full_cohort_size_gives_1314_positives():
    records = generate_cohort(CohortSpec(n_patients=5712, positive_fraction=0.23, T=2, m=2, S=1))
    assert len(records) == 5712
    assert sum(r.label for r in records) == 1314


@pytest.mark.parametrize("n,frac", [(10, 0.5), (97, 0.23), (1000, 0.013), (7, 0.6)])
def test_label_count_is_exact(n, frac):
    spec = CohortSpec(n_patients=n, positive_fraction=frac, n_subclusters_pos=1, T=2, m=2, S=1)
    labels = [r.label for r in generate_cohort(spec)]
    assert sum(labels) == round(frac * n)


def test_round_robin_groups():
    labels = np.array([0, 1, 1, 0, 1, 1, 1])
    assert latent_groups(labels, 2).tolist() == [-1, 0, 1, -1, 0, 1, 0]


def test_single_cluster_positive_means_near_center():
    spec = CohortSpec(
        n_patients=100, positive_fraction=0.5, n_subclusters_pos=1,
        subcluster_separation=0.0, missing_rate=0.0, T=6, m=5, S=4, seed=8,
    )  # fmt: skip
    records = generate_cohort(spec)
    centers = latent_centers(spec)
    pos = [r for r in records if r.label == 1]
    assert len(pos) == 50
    static = np.stack([r.static for r in pos])
    bound = 4 * spec.positive_spread / math.sqrt(50)
    assert np.all(np.abs(static.mean(0) - centers["static"][0]) < bound)
    # the time-average of a channel is its level plus averaged bin noise
    level = np.stack([r.values.mean(0) for r in pos])
    sigma = math.sqrt(spec.positive_spread**2 + spec.noise**2 / spec.T)
    assert np.all(np.abs(level.mean(0) - centers["level"][0]) < 4 * sigma / math.sqrt(50))


def test_separated_subclusters_have_high_silhouette():
    spec = CohortSpec(
        n_patients=240, positive_fraction=0.5, n_subclusters_pos=4,
        subcluster_separation=6.0, missing_rate=0.0, T=4, m=3, S=3, seed=1,
    )  # fmt: skip
    records = generate_cohort(spec)
    _, values, _, labels = stack(records)
    pos = np.flatnonzero(labels == 1)
    feats = np.hstack([np.stack([records[i].static for i in pos]), values[pos].mean(1)])
    groups = latent_groups(labels, 4)[pos]
    assert silhouette_bruteforce(feats, list(groups)) > 0.5


def test_no_separation_has_low_silhouette():
    spec = CohortSpec(
        n_patients=240, positive_fraction=0.5, n_subclusters_pos=4,
        subcluster_separation=0.0, missing_rate=0.0, T=4, m=3, S=3, seed=1,
    )  # fmt: skip
    records = generate_cohort(spec)
    _, values, _, labels = stack(records)
    pos = np.flatnonzero(labels == 1)
    feats = np.hstack([np.stack([records[i].static for i in pos]), values[pos].mean(1)])
    assert silhouette_bruteforce(feats, list(latent_groups(labels, 4)[pos])) < 0.1


def test_missingness_rate():
    spec = CohortSpec(n_patients=1250, T=8, m=10, S=2, missing_rate=0.37, seed=5)
    _, _, mask, _ = stack(generate_cohort(spec))
    assert mask.size >= 10**5
    assert abs((~mask).mean() - 0.37) < 0.01


def test_masked_cells_hold_sentinel():
    for r in generate_cohort(small(missing_rate=0.5)):
        assert np.all(np.isnan(r.values[~r.mask]))
        assert np.all(np.isfinite(r.values[r.mask]))


def test_deterministic_given_seed():
    a = generate_cohort(small())
    b = generate_cohort(small())
    c = generate_cohort(small(seed=4))
    assert a == b
    assert a != c


@pytest.mark.parametrize(
    "kw",
    [
        dict(positive_fraction=0.0),
        dict(positive_fraction=1.0),
        dict(missing_rate=1.0),
        dict(T=0),
        dict(n_subclusters_pos=0),
        dict(subcluster_separation=-1.0),
        dict(n_patients=10, positive_fraction=0.2, n_subclusters_pos=4),
    ],
)
def test_invalid_spec_rejected(kw):
    with pytest.raises(ValueError, match="invalid CohortSpec"):
        generate_cohort(small(**kw))


def test_record_validation():
    with pytest.raises(ValueError, match="label"):
        PatientRecord(0, [1.0], np.zeros((2, 2)), np.ones((2, 2), bool), 2)
    with pytest.raises(ValueError, match="shape"):
        PatientRecord(0, [1.0], np.zeros((2, 2)), np.ones((2, 3), bool), 0)


def test_round_trip_identity(tmp_path):
    records = generate_cohort(small(missing_rate=0.4))
    path = tmp_path / "c.csv"
    save_cohort(records, path, seed=3)
    back, meta = load_cohort(path, with_meta=True)
    assert back == records
    assert meta["seed"] == 3


def test_full_size_round_trip_preserves_positives(tmp_path):
    records = generate_cohort(CohortSpec(n_patients=5712, positive_fraction=0.23, T=3, m=3, S=2))
    path = tmp_path / "big.csv"
    save_cohort(records, path)
    back = load_cohort(path)
    assert sum(r.label for r in back) == 1314
    assert back == records


@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    n=st.integers(4, 30),
    miss=st.floats(0.0, 0.9),
    T=st.integers(1, 4),
    m=st.integers(1, 3),
)
def test_round_trip_property(tmp_path_factory, seed, n, miss, T, m):
    spec = CohortSpec(n_patients=n, positive_fraction=0.5, n_subclusters_pos=2, missing_rate=miss, T=T, m=m, S=2, seed=seed)
    records = generate_cohort(spec)
    path = tmp_path_factory.mktemp("rt") / "c.csv"
    save_cohort(records, path, seed=seed)
    assert load_cohort(path) == records


def test_non_numeric_cell_reports_location(tmp_path):
    path = tmp_path / "c.csv"
    save_cohort(generate_cohort(small()), path)
    lines = path.read_text().splitlines()
    cells = lines[3].split(",")
    cells[5] = "abc"
    lines[3] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CohortFormatError, match=r"line 4, field 6: non-numeric cell 'abc'"):
        load_cohort(path)


def test_na_in_static_field_is_an_error(tmp_path):
    path = tmp_path / "c.csv"
    save_cohort(generate_cohort(small()), path)
    lines = path.read_text().splitlines()
    cells = lines[1].split(",")
    cells[2] = "NA"
    lines[1] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CohortFormatError, match="line 2, field 3"):
        load_cohort(path)


def test_width_mismatch_rejected(tmp_path):
    path = tmp_path / "c.csv"
    save_cohort(generate_cohort(small()), path)
    lines = path.read_text().splitlines()
    lines[2] += ",1.0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="line 3: expected"):
        load_cohort(path)


def test_mixed_dims_cannot_be_saved(tmp_path):
    a = PatientRecord(0, [1.0], np.zeros((2, 2)), np.ones((2, 2), bool), 0)
    b = PatientRecord(1, [1.0], np.zeros((3, 2)), np.ones((3, 2), bool), 1)
    with pytest.raises(ValueError, match="dims"):
        save_cohort([a, b], tmp_path / "x.csv")


def test_malformed_header(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("hello\n")
    with pytest.raises(CohortFormatError, match="line 1"):
        load_cohort(path)


def test_patient_attributes_average_observed_bins():
    values = np.array([[1.0, 5.0], [3.0, np.nan], [np.nan, np.nan]])
    mask = ~np.isnan(values)
    r = PatientRecord(0, [0.0], values, mask, 1)
    full = PatientRecord(1, [0.0], np.full((3, 2), np.nan), np.zeros((3, 2), bool), 0)
    attrs, observed = patient_attributes([r, full])
    assert attrs[0].tolist() == [2.0, 5.0]
    assert observed.tolist() == [[True, True], [False, False]]
    assert np.all(np.isnan(attrs[1]))
