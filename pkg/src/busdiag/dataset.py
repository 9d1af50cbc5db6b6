"""Discovery, loading and hold-out splitting of the breast-ultrasound dataset.

Expected layout::

    <root>/benign/benign (1).png
    <root>/benign/benign (1)_mask.png
    <root>/benign/benign (1)_mask_1.png
    <root>/malignant/...
    <root>/normal/...
"""
from __future__ import annotations

import enum
import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

import cv2
import numpy as np


class DatasetError(Exception):
    pass


class ClassLabel(enum.IntEnum):
    BENIGN = 0
    MALIGNANT = 1
    NORMAL = 2

    @property
    def dirname(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class label: {value!r}") from None


CLASS_NAMES = [c.dirname for c in ClassLabel]

_FILE_RE = re.compile(r"^(?P<stem>.+?\((?P<num>\d+)\))(?P<mask>_mask(?:_(?P<k>\d+))?)?\.png$", re.IGNORECASE)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    raw_path: Path
    mask_paths: tuple
    label: ClassLabel

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": self.label.dirname,
            "raw_path": str(self.raw_path),
            "mask_paths": [str(p) for p in self.mask_paths],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        return cls(
            id=d["id"],
            raw_path=Path(d["raw_path"]),
            mask_paths=tuple(Path(p) for p in d["mask_paths"]),
            label=ClassLabel.parse(d["label"]),
        )


@dataclass
class DatasetIndex:
    records: List[SampleRecord] = field(default_factory=list)

    @property
    def class_counts(self) -> dict:
        counts = Counter(r.label for r in self.records)
        return {c: counts[c] for c in ClassLabel if counts[c]}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class DatasetSplit:
    train: List[SampleRecord]
    test: List[SampleRecord]
    ratio: float
    seed: int


@dataclass
class UltrasoundSample:
    id: str
    label: ClassLabel
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W x 1 float32 in {0, 1}
    source_size: tuple  # (H, W) before any resize


def read_image(path: os.PathLike, grayscale: bool = False) -> np.ndarray:
    """Decode an image file to float32 in [0, 1]; HxWx3 RGB or HxW when grayscale."""
    path = str(path)
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"cannot decode image: {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        scale = 1.0
    img = img.astype(np.float32) / scale
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    if grayscale:
        if img.ndim == 3:
            img = img.mean(axis=2)
        return np.clip(img, 0.0, 1.0)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    else:
        img = img[:, :, ::-1]  # BGR -> RGB
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


def _check_decodes(path: Path) -> tuple:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"unreadable file: {path}")
    return img.shape[:2]


def scan_dataset(root_dir: os.PathLike, validate: bool = True) -> DatasetIndex:
    """Pair every raw image under ``root_dir`` with all of its mask files.

    Records come back ordered by class (benign, malignant, normal) and then by
    the numeric id in the filename. With ``validate`` every file is decoded once
    and mask sizes are checked against the raw image.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a directory: {root}")

    records: List[SampleRecord] = []
    orphans: List[str] = []
    for label in ClassLabel:
        class_dir = root / label.dirname
        if not class_dir.is_dir():
            continue
        raws = {}
        masks = {}
        for entry in sorted(class_dir.iterdir()):
            m = _FILE_RE.match(entry.name)
            if not m or not entry.is_file():
                continue
            stem = m.group("stem")
            num = int(m.group("num"))
            if m.group("mask"):
                k = int(m.group("k")) if m.group("k") else 0
                masks.setdefault(stem, []).append((k, entry))
            else:
                raws[stem] = (num, entry)
        for stem in masks:
            if stem not in raws:
                orphans.append(f"mask without raw image: {class_dir / stem}")
        for stem, (num, raw_path) in sorted(raws.items(), key=lambda kv: (kv[1][0], kv[0])):
            if stem not in masks:
                orphans.append(f"raw image without mask: {raw_path}")
                continue
            mask_paths = tuple(p for _, p in sorted(masks[stem]))
            records.append(SampleRecord(id=stem, raw_path=raw_path, mask_paths=mask_paths, label=label))

    if orphans:
        raise DatasetError("unpaired files:\n  " + "\n  ".join(orphans))

    if validate:
        for rec in records:
            size = _check_decodes(rec.raw_path)
            for mp in rec.mask_paths:
                if _check_decodes(mp) != size:
                    raise DatasetError(f"mask size differs from raw image {size}: {mp}")
    return DatasetIndex(records)


def load_sample(record: SampleRecord) -> UltrasoundSample:
    image = read_image(record.raw_path)
    h, w = image.shape[:2]
    merged = np.zeros((h, w), dtype=bool)
    for mp in record.mask_paths:
        m = read_image(mp, grayscale=True)
        if m.shape != (h, w):
            raise DatasetError(f"mask {mp} has size {m.shape}, raw image has {(h, w)}")
        merged |= m >= 0.5
    return UltrasoundSample(
        id=record.id,
        label=record.label,
        image=image,
        mask=merged.astype(np.float32)[:, :, None],
        source_size=(h, w),
    )


def split_holdout(index: DatasetIndex | Sequence[SampleRecord], ratio: float = 0.8, seed: int = 15) -> DatasetSplit:
    """Unstratified shuffled hold-out split.

    A ``RandomState(seed)`` permutation is drawn; its first ``N - n_train``
    entries form the test set and the remainder the training set.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    records = list(index.records if isinstance(index, DatasetIndex) else index)
    n = len(records)
    n_train = int(math.floor(ratio * n + 0.5))
    perm = np.random.RandomState(seed).permutation(n)
    n_test = n - n_train
    test = [records[i] for i in perm[:n_test]]
    train = [records[i] for i in perm[n_test:]]
    return DatasetSplit(train=train, test=test, ratio=ratio, seed=seed)


def write_manifest(records: Iterable[SampleRecord], path: os.PathLike) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_manifest(path: os.PathLike) -> List[SampleRecord]:
    with open(path) as fh:
        return [SampleRecord.from_json(json.loads(line)) for line in fh if line.strip()]
