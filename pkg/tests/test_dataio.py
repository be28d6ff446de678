import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurofuse import dataio
from neurofuse.dataio import (
    Connectome,
    ConnectomeDataset,
    FormatError,
    KnowledgeBase,
    StratificationError,
    ValidationError,
)


def _dataset(n_subjects=12, v=5, num_classes=2, groups=("female", "male"), seed=0):
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n_subjects):
        upper = rng.uniform(0.0, 1.0, size=v * (v - 1) // 2)
        w = np.zeros((v, v))
        iu = np.triu_indices(v, k=1)
        w[iu] = upper
        w[(iu[1], iu[0])] = upper
        subjects.append(
            Connectome(
                subject_id=f"s{i:03d}",
                num_nodes=v,
                adjacency=w,
                label=i % num_classes,
                group=groups[i % len(groups)],
            )
        )
    return ConnectomeDataset(subjects=subjects, num_classes=num_classes, groups=list(groups))


def test_round_trip(tmp_path):
    ds = _dataset()
    path = tmp_path / "ds.jsonl"
    dataio.save_dataset(ds, str(path))
    loaded = dataio.load_dataset(str(path))
    assert loaded.num_classes == ds.num_classes
    assert loaded.groups == ds.groups
    assert len(loaded.subjects) == len(ds.subjects)
    for a, b in zip(ds.subjects, loaded.subjects):
        assert a.subject_id == b.subject_id
        assert a.label == b.label
        assert a.group == b.group
        assert np.array_equal(a.adjacency, b.adjacency)


def test_asymmetric_adjacency_rejected(tmp_path):
    ds = _dataset()
    ds.subjects[3].adjacency[0, 1] += 0.25
    path = tmp_path / "bad.jsonl"
    with pytest.raises(ValidationError, match="s003"):
        dataio.save_dataset(ds, str(path))
    # and through the file route, bypassing save-side validation
    good = _dataset()
    dataio.save_dataset(good, str(path))
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["adjacency"][1] += 0.5
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="symmetric"):
        dataio.load_dataset(str(path))


def test_validation_errors_name_subject(tmp_path):
    ds = _dataset()
    ds.subjects[5].label = 7
    with pytest.raises(ValidationError, match="s005"):
        ds.validate()
    ds = _dataset()
    ds.subjects[2].group = "unknown"
    with pytest.raises(ValidationError, match="s002"):
        ds.validate()
    ds = _dataset()
    ds.subjects[1].adjacency[0, 0] = 1.0
    with pytest.raises(ValidationError, match="diagonal"):
        ds.validate()


def test_ragged_node_counts_rejected(tmp_path):
    ds = _dataset()
    path = tmp_path / "ragged.jsonl"
    dataio.save_dataset(ds, str(path))
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["adjacency"] = [0.0] * 16  # 4x4 instead of 5x5
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="entries"):
        dataio.load_dataset(str(path))


def test_oasis_shaped_file(tmp_path):
    # 815 subjects with 132 nodes each; all-zero weights keep the file small
    v, n = 132, 815
    path = tmp_path / "oasis_shape.jsonl"
    header = {"format": "cnx-v1", "num_nodes": v, "num_classes": 2, "groups": ["female", "male"]}
    zero_row = json.dumps([0] * (v * v))
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(n):
            fh.write(
                '{"subject_id":"s%04d","label":%d,"group":"%s","adjacency":%s}\n'
                % (i, i % 2, ["female", "male"][i % 2], zero_row)
            )
    ds = dataio.load_dataset(str(path))
    assert len(ds.subjects) == 815
    assert ds.num_nodes == 132


def test_adni_shaped_file(tmp_path):
    v, n = 85, 340
    path = tmp_path / "adni_shape.jsonl"
    header = {"format": "cnx-v1", "num_nodes": v, "num_classes": 2, "groups": ["female", "male"]}
    zero_row = json.dumps([0] * (v * v))
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(n):
            fh.write(
                '{"subject_id":"s%04d","label":%d,"group":"%s","adjacency":%s}\n'
                % (i, i % 2, ["female", "male"][i % 2], zero_row)
            )
    ds = dataio.load_dataset(str(path))
    assert len(ds.subjects) == 340
    assert ds.num_nodes == 85


def test_kemb_large_header(tmp_path):
    n, d = 20108, 1024
    path = tmp_path / "kb.kemb"
    kb = KnowledgeBase(embeddings=np.zeros((n, d)))
    dataio.save_knowledge(kb, str(path))
    loaded = dataio.load_knowledge(str(path))
    assert (loaded.count, loaded.dim) == (20108, 1024)


def test_kemb_truncation_error(tmp_path):
    path = tmp_path / "bad.kemb"
    with open(path, "wb") as fh:
        fh.write(b"KEMB")
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<QQ", 3, 4))
        fh.write(np.zeros(8, dtype="<f4").tobytes())  # 2 rows instead of 3
    with pytest.raises(FormatError, match="truncated"):
        dataio.load_knowledge(str(path))


def test_kemb_bad_magic(tmp_path):
    path = tmp_path / "bad.kemb"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(FormatError, match="magic"):
        dataio.load_knowledge(str(path))


def test_kemb_non_finite(tmp_path):
    path = tmp_path / "nan.kemb"
    mat = np.zeros((2, 3), dtype="<f4")
    mat[1, 2] = np.nan
    with open(path, "wb") as fh:
        fh.write(b"KEMB" + struct.pack("<I", 1) + struct.pack("<QQ", 2, 3) + mat.tobytes())
    with pytest.raises(FormatError, match="finite"):
        dataio.load_knowledge(str(path))


def test_kemb_single_row(tmp_path):
    path = tmp_path / "one.kemb"
    dataio.save_knowledge(KnowledgeBase(embeddings=np.ones((1, 4))), str(path))
    kb = dataio.load_knowledge(str(path))
    assert (kb.count, kb.dim) == (1, 4)


def test_kemb_item_id_trailer(tmp_path):
    path = tmp_path / "ids.kemb"
    kb = KnowledgeBase(embeddings=np.ones((3, 2)), item_ids=["a", "b", "c"])
    dataio.save_knowledge(kb, str(path), trailer_extra={"encoder": "test"})
    loaded = dataio.load_knowledge(str(path))
    assert loaded.item_ids == ["a", "b", "c"]
    # mismatched id count is a format error
    blob = path.read_bytes()
    payload_end = 24 + 3 * 2 * 4
    bad = blob[:payload_end] + json.dumps({"item_ids": ["a"]}).encode()
    path.write_bytes(bad)
    with pytest.raises(FormatError, match="item ids"):
        dataio.load_knowledge(str(path))


def test_split_sizes_and_determinism():
    ds = _dataset(n_subjects=815, v=4, seed=5)
    split = dataio.split_dataset(ds, (0.7, 0.1, 0.2), seed=9)
    assert (len(split.train), len(split.val), len(split.test)) == (570, 81, 164)
    again = dataio.split_dataset(ds, (0.7, 0.1, 0.2), seed=9)
    assert (split.train, split.val, split.test) == (again.train, again.val, again.test)
    different = dataio.split_dataset(ds, (0.7, 0.1, 0.2), seed=10)
    assert split.train != different.train


def test_split_bad_ratios():
    ds = _dataset()
    with pytest.raises(ValidationError):
        dataio.split_dataset(ds, (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(ValidationError):
        dataio.split_dataset(ds, (0.9, -0.1, 0.2), seed=0)


def test_split_partitions_and_stratification():
    ds = _dataset(n_subjects=60, v=4, seed=2)
    split = dataio.split_dataset(ds, (0.6, 0.2, 0.2), seed=3)
    combined = sorted(split.train + split.val + split.test)
    assert combined == list(range(60))
    # per-label proportions deviate from the ratio by under one sample
    labels = np.array([s.label for s in ds.subjects])
    for part, ratio in ((split.train, 0.6), (split.val, 0.2), (split.test, 0.2)):
        for c in (0, 1):
            n_c = int((labels == c).sum())
            got = sum(1 for i in part if labels[i] == c)
            assert abs(got - ratio * n_c) < 1.0


def test_split_small_stratum_error():
    ds = _dataset(n_subjects=5, v=4, num_classes=2)
    # label 1 has only 2 subjects
    with pytest.raises(StratificationError):
        dataio.split_dataset(ds, (0.6, 0.2, 0.2), seed=0)


def test_split_file_round_trip(tmp_path):
    ds = _dataset(n_subjects=30, v=4)
    split = dataio.split_dataset(ds, (0.5, 0.25, 0.25), seed=4)
    path = tmp_path / "split.json"
    dataio.save_split(split, str(path))
    loaded = dataio.load_split(str(path))
    assert (loaded.train, loaded.val, loaded.test, loaded.seed) == (
        split.train,
        split.val,
        split.test,
        4,
    )


def test_subsample_counts():
    kb = KnowledgeBase(embeddings=np.random.default_rng(0).normal(size=(20108, 4)))
    assert dataio.subsample_knowledge(kb, 0.01, seed=1).count == 202
    assert dataio.subsample_knowledge(kb, 0.10, seed=1).count == 2011


def test_subsample_identity_and_determinism():
    rng = np.random.default_rng(3)
    kb = KnowledgeBase(embeddings=rng.normal(size=(50, 3)), item_ids=[f"i{j}" for j in range(50)])
    full = dataio.subsample_knowledge(kb, 1.0, seed=7)
    assert np.array_equal(full.embeddings, kb.embeddings)
    assert full.item_ids == kb.item_ids
    a = dataio.subsample_knowledge(kb, 0.3, seed=7)
    b = dataio.subsample_knowledge(kb, 0.3, seed=7)
    assert np.array_equal(a.embeddings, b.embeddings)
    # fraction f then 1.0 is idempotent
    again = dataio.subsample_knowledge(a, 1.0, seed=99)
    assert np.array_equal(a.embeddings, again.embeddings)


@given(st.floats(min_value=1.01, max_value=10.0) | st.floats(max_value=0.0, allow_nan=False))
@settings(max_examples=25, deadline=None)
def test_subsample_fraction_range_errors(fraction):
    kb = KnowledgeBase(embeddings=np.ones((4, 2)))
    with pytest.raises(ValidationError):
        dataio.subsample_knowledge(kb, fraction, seed=0)


def test_subsample_rows_match_source():
    rng = np.random.default_rng(8)
    kb = KnowledgeBase(embeddings=rng.normal(size=(40, 5)), item_ids=[f"i{j}" for j in range(40)])
    sub = dataio.subsample_knowledge(kb, 0.25, seed=2)
    assert sub.count == 10
    by_id = {i: row for i, row in zip(kb.item_ids, kb.embeddings)}
    for item_id, row in zip(sub.item_ids, sub.embeddings):
        assert np.array_equal(by_id[item_id], row)
