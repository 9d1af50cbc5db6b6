from pathlib import Path

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from busdiag.dataset import (
    ClassLabel,
    DatasetError,
    DatasetIndex,
    SampleRecord,
    load_sample,
    read_manifest,
    scan_dataset,
    split_holdout,
    write_manifest,
)


def _write(path: Path, arr) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), np.asarray(arr, dtype=np.uint8))
    return path


def _fake_records(n):
    return [SampleRecord(id=f"r{i}", raw_path=Path(f"r{i}.png"), mask_paths=(Path(f"r{i}_mask.png"),), label=ClassLabel(i % 3)) for i in range(n)]


def test_label_encoding_is_stable():
    assert [int(c) for c in ClassLabel] == [0, 1, 2]
    assert ClassLabel.parse("Malignant") is ClassLabel.MALIGNANT
    assert ClassLabel.parse(2) is ClassLabel.NORMAL
    with pytest.raises(ValueError):
        ClassLabel.parse("cyst")


def test_scan_synthetic_dataset(synthetic_root):
    index = scan_dataset(synthetic_root)
    assert len(index) == 9
    assert index.class_counts == {ClassLabel.BENIGN: 3, ClassLabel.MALIGNANT: 3, ClassLabel.NORMAL: 3}
    assert sum(index.class_counts.values()) == len(index.records)
    assert [r.label for r in index.records] == [ClassLabel.BENIGN] * 3 + [ClassLabel.MALIGNANT] * 3 + [ClassLabel.NORMAL] * 3


def test_scan_empty_directory(tmp_path):
    index = scan_dataset(tmp_path)
    assert len(index) == 0
    assert index.class_counts == {}


def test_scan_pairs_multiple_masks(tmp_path):
    img = np.full((20, 20), 100)
    _write(tmp_path / "benign" / "benign (1).png", img)
    _write(tmp_path / "benign" / "benign (1)_mask.png", img * 0)
    _write(tmp_path / "benign" / "benign (1)_mask_1.png", img * 0)
    index = scan_dataset(tmp_path)
    assert len(index) == 1
    rec = index.records[0]
    assert rec.id == "benign (1)"
    assert [p.name for p in rec.mask_paths] == ["benign (1)_mask.png", "benign (1)_mask_1.png"]


def test_scan_orders_numerically(tmp_path):
    img = np.zeros((8, 8))
    for n in (10, 2, 1):
        _write(tmp_path / "normal" / f"normal ({n}).png", img)
        _write(tmp_path / "normal" / f"normal ({n})_mask.png", img)
    ids = [r.id for r in scan_dataset(tmp_path).records]
    assert ids == ["normal (1)", "normal (2)", "normal (10)"]
    assert ids == [r.id for r in scan_dataset(tmp_path).records]


def test_scan_reports_orphans(tmp_path):
    img = np.zeros((8, 8))
    _write(tmp_path / "malignant" / "malignant (3).png", img)
    with pytest.raises(DatasetError, match=r"malignant \(3\)"):
        scan_dataset(tmp_path)


def test_scan_reports_unreadable_file(tmp_path):
    _write(tmp_path / "benign" / "benign (1)_mask.png", np.zeros((8, 8)))
    bad = tmp_path / "benign" / "benign (1).png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="benign \\(1\\).png"):
        scan_dataset(tmp_path)


def test_scan_rejects_size_mismatch(tmp_path):
    _write(tmp_path / "benign" / "benign (1).png", np.zeros((8, 8)))
    _write(tmp_path / "benign" / "benign (1)_mask.png", np.zeros((9, 8)))
    with pytest.raises(DatasetError, match="size"):
        scan_dataset(tmp_path)


def test_load_normal_sample_has_empty_mask(synthetic_root):
    rec = [r for r in scan_dataset(synthetic_root).records if r.label == ClassLabel.NORMAL][0]
    s = load_sample(rec)
    assert s.mask.sum() == 0
    assert s.image.shape == (160, 160, 3)
    assert s.image.min() >= 0 and s.image.max() <= 1
    # grayscale source replicated to three channels
    assert np.array_equal(s.image[:, :, 0], s.image[:, :, 2])


def test_load_merges_masks_by_union(tmp_path):
    a = np.zeros((30, 30))
    a[5:20, 5:20] = 255
    b = np.zeros((30, 30))
    b[8:12, 8:12] = 255
    _write(tmp_path / "benign" / "benign (1).png", np.full((30, 30), 80))
    _write(tmp_path / "benign" / "benign (1)_mask.png", a)
    _write(tmp_path / "benign" / "benign (1)_mask_1.png", b)
    s = load_sample(scan_dataset(tmp_path).records[0])
    assert np.array_equal(s.mask[:, :, 0], (a > 0).astype(np.float32))
    assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_load_reports_source_size(tmp_path):
    _write(tmp_path / "benign" / "benign (1).png", np.full((500, 500), 10))
    _write(tmp_path / "benign" / "benign (1)_mask.png", np.zeros((500, 500)))
    s = load_sample(scan_dataset(tmp_path).records[0])
    assert s.source_size == (500, 500)


def test_split_sizes_for_full_dataset():
    split = split_holdout(_fake_records(780), 0.8, 15)
    assert len(split.train) == 624
    assert len(split.test) == 156


def test_split_is_deterministic():
    recs = _fake_records(50)
    a, b = split_holdout(recs, 0.8, 15), split_holdout(recs, 0.8, 15)
    assert [r.id for r in a.test] == [r.id for r in b.test]
    assert [r.id for r in split_holdout(recs, 0.8, 16).test] != [r.id for r in a.test]


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.5, 1.2])
def test_split_rejects_bad_ratio(ratio):
    with pytest.raises(ValueError):
        split_holdout(_fake_records(10), ratio)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(0, 300), ratio=st.floats(0.05, 0.95), seed=st.integers(0, 2 ** 31 - 1))
def test_split_partitions_records(n, ratio, seed):
    recs = _fake_records(n)
    split = split_holdout(DatasetIndex(recs), ratio, seed)
    train_ids = [r.id for r in split.train]
    test_ids = [r.id for r in split.test]
    assert not set(train_ids) & set(test_ids)
    assert sorted(train_ids + test_ids) == sorted(r.id for r in recs)
    assert len(train_ids) == int(np.floor(ratio * n + 0.5))


def test_manifest_round_trip(synthetic_root, tmp_path):
    recs = scan_dataset(synthetic_root).records
    write_manifest(recs, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == recs
