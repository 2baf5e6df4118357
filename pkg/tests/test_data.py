import numpy as np
import pytest

from cvdose.data import DoseLevel, OutcomeKind, SubjectRecord, TrialDataset, arm_partition, validate
from conftest import make_dataset


def _records(arms, outcome=1.0):
    return [SubjectRecord(f"p{i:02d}", int(a), 1.0 + a, outcome) for i, a in enumerate(arms)]


def test_well_formed_dataset_has_no_violations():
    rng = np.random.default_rng(0)
    ds = make_dataset(np.repeat([0, 1, 2], 20), rng.normal(size=60), rng.normal(size=60))
    assert validate(ds).ok


def test_binary_half_outcome_names_subject():
    arms = [0, 0, 1, 1]
    recs = _records(arms, 0.0)
    recs[2] = SubjectRecord("bad", 1, 2.0, 0.5)
    ds = TrialDataset.from_records([DoseLevel(0, 1.0), DoseLevel(1, 2.0)], recs, OutcomeKind.BINARY)
    report = validate(ds)
    assert len(report) == 1
    assert report.violations[0].subject_id == "bad"


def test_empty_arm_reported():
    ds = TrialDataset.from_records([DoseLevel(0, 1.0), DoseLevel(1, 2.0), DoseLevel(2, 3.0)], _records([0, 0, 2, 2]))
    assert [v.message for v in validate(ds)] == ["empty arm 1"]


def test_single_arm_rejected():
    ds = TrialDataset.from_records([DoseLevel(0, 1.0)], _records([0, 0, 0]))
    assert any("at least 2" in v.message for v in validate(ds))


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda r: SubjectRecord(r.subject_id, r.arm_index, float("nan"), r.outcome), "exposure"),
        (lambda r: SubjectRecord(r.subject_id, r.arm_index, r.exposure, float("inf")), "outcome"),
        (lambda r: SubjectRecord(r.subject_id, 7, r.exposure, r.outcome), "does not reference"),
    ],
)
def test_bad_subject_fields(mutate, fragment):
    recs = _records([0, 0, 1, 1])
    recs[1] = mutate(recs[1])
    ds = TrialDataset.from_records([DoseLevel(0, 1.0), DoseLevel(1, 2.0)], recs)
    assert any(fragment in v.message for v in validate(ds))


def test_ragged_covariates_and_non_increasing_doses():
    recs = [SubjectRecord("a", 0, 1.0, 1.0, (1.0,)), SubjectRecord("b", 1, 1.0, 1.0, (1.0, 2.0))]
    ds = TrialDataset.from_records([DoseLevel(0, 2.0), DoseLevel(1, 2.0)], recs)
    msgs = " | ".join(v.message for v in validate(ds))
    assert "differ in length" in msgs and "increase strictly" in msgs


def test_validate_idempotent():
    ds = TrialDataset.from_records([DoseLevel(0, 1.0), DoseLevel(1, 2.0)], _records([0, 1, 1, 5]))
    assert validate(ds) == validate(ds)


def test_arm_partition_alternating():
    ds = make_dataset(np.array([0, 1, 0, 1, 0, 1]), np.zeros(6), np.zeros(6))
    # canonical order is (arm, id): s0000, s0002, s0004 | s0001, s0003, s0005
    parts = arm_partition(ds)
    assert [list(ds.subject_ids[p]) for p in parts] == [["s0000", "s0002", "s0004"], ["s0001", "s0003", "s0005"]]
    assert [list(p) for p in parts] == [[0, 1, 2], [3, 4, 5]]


def test_partition_of_balanced_allocation():
    ds = make_dataset(np.arange(60) % 3, np.zeros(60), np.zeros(60))
    parts = arm_partition(ds)
    assert [len(p) for p in parts] == [20, 20, 20]
    assert sorted(np.concatenate(parts)) == list(range(60))


def test_canonical_order_independent_of_input_order():
    rng = np.random.default_rng(3)
    arm = np.repeat([0, 1], 5)
    c, y = rng.normal(size=10), rng.normal(size=10)
    a = make_dataset(arm, c, y)
    perm = rng.permutation(10)
    b = make_dataset(arm[perm], c[perm], y[perm], ids=[f"s{i:04d}" for i in perm])
    assert np.array_equal(a.exposure, b.exposure) and np.array_equal(a.subject_ids, b.subject_ids)


def test_arrays_are_read_only():
    ds = make_dataset(np.array([0, 1]), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        ds.exposure[0] = 1.0
