# Unit tests for bags.py

from datetime import date, datetime, timedelta

import numpy as np
import pytest

from wearmil.bags import (
    Assessment,
    Bag,
    build_bags,
    cap_instances,
    decode_bag,
    filter_modalities,
    load_bag_dir,
    normalize_horizon,
    pack_container,
    read_bag,
    tabulate_bag_counts,
    write_bag,
    write_bags,
)
from wearmil.ecg_transforms import MODALITY_ECG
from wearmil.encoder import EMBEDDING_DIM, Embedding
from wearmil.errors import DataError, FormatError
from tests.conftest import make_bag

M3_DATE = date(2024, 4, 8)
M6_DATE = date(2024, 7, 8)


def _embedding(pid, instant, modality_id=MODALITY_ECG, seed=0):
    values = np.random.default_rng(seed).normal(size=EMBEDDING_DIM)
    return Embedding(values, modality_id, pid, instant)


def _assessments(pid="P001"):
    return [Assessment(pid, "M3", M3_DATE, 17), Assessment(pid, "M6", M6_DATE, 21)]


@pytest.fixture
def patient_embeddings():
    start = datetime(2024, 1, 8, 9)
    return {"P001": [
        _embedding("P001", start + timedelta(days=7 * k), modality_id=k % 3, seed=k)
        for k in range(30)  # weekly instances through early August
    ]}


# --- Assembly ---

def test_m3_bags_never_see_post_assessment_instances(patient_embeddings):
    (bag,) = build_bags(patient_embeddings, _assessments(), "M3", verbose=False)
    assert bag.horizon == "M3"
    assert bag.target == 17.0
    assert max(bag.instants) <= datetime.combine(M3_DATE, datetime.max.time())
    assert bag.instants == sorted(bag.instants)


def test_m6_bags_include_pre_m3_instances(patient_embeddings):
    (m3,) = build_bags(patient_embeddings, _assessments(), "m3", verbose=False)
    (m6,) = build_bags(patient_embeddings, _assessments(), "ALL->M6", verbose=False)
    assert m6.target == 21.0
    assert set(m3.instants) < set(m6.instants)
    assert max(m6.instants).date() <= M6_DATE
    assert m6.n > m3.n


def test_instance_on_assessment_day_is_eligible():
    late = datetime.combine(M3_DATE, datetime.min.time()).replace(hour=23, minute=59)
    embeddings = {"P001": [_embedding("P001", late)]}
    (bag,) = build_bags(embeddings, _assessments(), "M3", verbose=False)
    assert bag.n == 1


def test_leakage_scan_over_random_cohort():
    rng = np.random.default_rng(7)
    embeddings, assessments = {}, []
    for i in range(20):
        pid = f"P{i + 1:03d}"
        baseline = datetime(2024, 1, 1) + timedelta(days=int(rng.integers(0, 30)))
        m3 = (baseline + timedelta(days=91)).date()
        m6 = (baseline + timedelta(days=182)).date()
        assessments += [Assessment(pid, "M3", m3, int(rng.integers(0, 41))),
                        Assessment(pid, "M6", m6, int(rng.integers(0, 41)))]
        instants = [baseline + timedelta(hours=int(h)) for h in rng.integers(0, 24 * 220, size=40)]
        embeddings[pid] = [_embedding(pid, t, int(rng.integers(0, 3)), seed=k) for k, t in enumerate(instants)]
    dates = {(a.patient_id, a.horizon): a.date for a in assessments}
    for horizon in ("M3", "M6"):
        for bag in build_bags(embeddings, assessments, horizon, verbose=False):
            assert all(t.date() <= dates[(bag.patient_id, horizon)] for t in bag.instants)


def test_patients_without_assessment_or_instances_skipped(patient_embeddings, capsys):
    embeddings = dict(patient_embeddings)
    embeddings["P002"] = [_embedding("P002", datetime(2024, 9, 1))]
    embeddings["P003"] = [_embedding("P003", datetime(2024, 1, 9))]
    assessments = _assessments() + _assessments("P002")
    bags = build_bags(embeddings, assessments, "M3")
    assert [b.patient_id for b in bags] == ["P001"]
    out = capsys.readouterr().out
    assert "Skipping P002" in out and "Skipping P003" in out


def test_m6_before_m3_is_data_error(patient_embeddings):
    assessments = [Assessment("P001", "M3", M6_DATE, 10), Assessment("P001", "M6", M3_DATE, 12)]
    with pytest.raises(DataError):
        build_bags(patient_embeddings, assessments, "M3", verbose=False)


def test_assessment_validation():
    with pytest.raises(DataError):
        Assessment("P001", "M3", M3_DATE, 41)
    with pytest.raises(ValueError):
        normalize_horizon("M9")
    assert normalize_horizon("M3→M3") == "M3"


# --- Capping and filtering ---

def test_cap_uniform_is_seeded_and_keeps_order():
    bag = make_bag("P001", 12.0, n=20)
    a = cap_instances(bag, 8, seed=3)
    b = cap_instances(bag, 8, seed=3)
    assert a == b
    assert a.n == 8
    assert a.instants == sorted(a.instants)
    assert a.meta["capped_from"] == 20
    assert cap_instances(bag, 20) is bag


def test_cap_latest_keeps_most_recent():
    bag = make_bag("P001", 12.0, n=10)
    capped = cap_instances(bag, 3, policy="latest")
    assert capped.instants == sorted(bag.instants)[-3:]
    with pytest.raises(ValueError):
        cap_instances(bag, 3, policy="oldest")
    with pytest.raises(ValueError):
        cap_instances(bag, 0)


def test_filter_modalities():
    bag = make_bag("P001", 12.0, n=6, modality_ids=[0, 1, 2, 0, 1, 2])
    ecg = filter_modalities(bag, {MODALITY_ECG})
    assert ecg.n == 2 and set(ecg.modality_ids.tolist()) == {MODALITY_ECG}
    assert filter_modalities(bag, {0, 1, 2}) is bag
    watch_only = make_bag("P002", 5.0, n=3, modality_ids=[1, 2, 1])
    assert filter_modalities(watch_only, {MODALITY_ECG}) is None


def test_empty_bag_refused():
    with pytest.raises(ValueError):
        Bag("P001", "M3", np.zeros((0, EMBEDDING_DIM)), np.zeros(0), [], 1.0)


# --- Container ---

def test_write_and_read_bag(tmp_path):
    bag = make_bag("P001", 17.0, n=4, modality_ids=[0, 1, 2, 1])
    path = write_bag(bag, str(tmp_path / "P001_M3.wmb"))
    assert open(path, "rb").read(4) == b"WMB1"
    assert read_bag(path, expected_dim=EMBEDDING_DIM) == bag


def test_bad_magic_reported_at_offset_zero():
    with pytest.raises(FormatError) as excinfo:
        decode_bag(b"XXXX" + b"\x00" * 32)
    assert excinfo.value.offset == 0


def test_truncated_embeddings_reported():
    dim = 4
    header = {"patient_id": "P001", "horizon": "M3", "n": 5, "dim": dim, "target": 3.0,
              "instants": [datetime(2024, 1, 8, h).isoformat() for h in range(5)]}
    embeddings = np.zeros((4, dim), dtype="<f4").tobytes()
    raw = pack_container(header, embeddings, b"")
    with pytest.raises(FormatError, match="truncated: header n=5 but 4 embedding rows present"):
        decode_bag(raw)


def test_dimension_mismatch_and_bad_modality():
    bag = make_bag("P001", 17.0, n=2, dim=8)
    header = {"patient_id": "P001", "horizon": "M3", "n": 2, "dim": 8, "target": 17.0,
              "instants": [t.isoformat() for t in bag.instants]}
    good = pack_container(header, bag.embeddings.astype("<f4").tobytes(), bytes([0, 1]))
    with pytest.raises(FormatError, match="dimension"):
        decode_bag(good, expected_dim=EMBEDDING_DIM)
    bad = pack_container(header, bag.embeddings.astype("<f4").tobytes(), bytes([0, 7]))
    with pytest.raises(FormatError, match="out of range"):
        decode_bag(bad)
    trailing = pack_container(header, bag.embeddings.astype("<f4").tobytes(), bytes([0, 1, 2]))
    with pytest.raises(FormatError, match="trailing"):
        decode_bag(trailing)


def test_load_bag_dir_skips_unreadable_files(tmp_path, capsys):
    write_bags([make_bag("P001", 10.0), make_bag("P002", 20.0), make_bag("P001", 11.0, horizon="M6")], str(tmp_path))
    (tmp_path / "P003_M3.wmb").write_bytes(b"XXXX")
    (tmp_path / "notes.txt").write_text("ignored")
    bags = load_bag_dir(str(tmp_path))
    assert [b.bag_id for b in bags] == ["P001_M3", "P001_M6", "P002_M3"]
    assert "failed: 1" in capsys.readouterr().out
    assert [b.bag_id for b in load_bag_dir(str(tmp_path), "m6", verbose=False)] == ["P001_M6"]
    with pytest.raises(FileNotFoundError):
        load_bag_dir(str(tmp_path / "missing"))


def test_bag_count_table():
    bags = [
        make_bag("P001", 10.0, n=3, modality_ids=[0, 0, 1]),
        make_bag("P002", 20.0, n=2, modality_ids=[1, 2]),
        make_bag("P001", 12.0, n=1, modality_ids=[2], horizon="M6"),
    ]
    table = tabulate_bag_counts(bags).set_index("modality")
    assert list(table.columns) == ["M3_instances", "M3_bags", "M6_instances", "M6_bags"]
    assert table.loc["ecg", "M3_instances"] == 2 and table.loc["ecg", "M3_bags"] == 1
    assert table.loc["activity", "M3_bags"] == 2
    assert table.loc["sleep", "M6_instances"] == 1
    assert table.loc["total", "M3_instances"] == 5 and table.loc["total", "M3_bags"] == 2
    assert table.loc["ecg", "M6_bags"] == 0
