"""Synthetic ultrasound-like cases for smoke runs and tests.

Benign cases carry a smooth dark ellipse, malignant cases an irregular
spiculated dark lesion, normal cases no lesion. Backgrounds are speckled.
"""
from __future__ import annotations

import os
from pathlib import Path

import cv2
import numpy as np

from .dataset import ClassLabel


def _lesion_mask(label: ClassLabel, size: int, rng: np.random.Generator) -> np.ndarray:
    if label == ClassLabel.NORMAL:
        return np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    r = rng.uniform(0.12, 0.22) * size
    ang = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    if label == ClassLabel.BENIGN:
        ecc = rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        return (u / r) ** 2 + (v / (r * ecc)) ** 2 <= 1.0
    spikes = rng.integers(5, 9)
    phase = rng.uniform(0, 2 * np.pi)
    boundary = r * (1.0 + 0.35 * np.sin(spikes * ang + phase))
    return rad <= boundary


def synthetic_case(label: ClassLabel, size: int = 128, seed: int = 0) -> tuple:
    """Return (image HxW uint8, mask HxW uint8 in {0, 255})."""
    rng = np.random.default_rng(seed)
    mask = _lesion_mask(label, size, rng)
    depth = np.linspace(0.65, 0.45, size)[:, None]
    speckle = rng.rayleigh(0.18, (size, size))
    img = depth * (0.6 + speckle)
    img = cv2.GaussianBlur(img.astype(np.float32), (3, 3), 0)
    img[mask] *= 0.25
    img = np.clip(img, 0, 1)
    return (img * 255).astype(np.uint8), mask.astype(np.uint8) * 255


def synthetic_arrays(n: int, size: int = 128, seed: int = 0, labels=None) -> tuple:
    """n cases as float arrays: images (n,H,W,3) in [0,1], masks (n,H,W,1), labels (n,)."""
    if labels is None:
        labels = [ClassLabel(i % 3) for i in range(n)]
    images, masks = [], []
    for i, lab in enumerate(labels):
        img, m = synthetic_case(ClassLabel(lab), size, seed + i)
        images.append(np.repeat(img[:, :, None], 3, axis=2).astype(np.float32) / 255.0)
        masks.append((m[:, :, None] > 0).astype(np.float32))
    return np.stack(images), np.stack(masks), np.array([int(l) for l in labels])


def write_synthetic_dataset(root: os.PathLike, per_class: dict | int = 4, size: int = 160, seed: int = 0) -> Path:
    """Write a dataset directory in the expected on-disk layout and return its root."""
    root = Path(root)
    if isinstance(per_class, int):
        per_class = {lab: per_class for lab in ClassLabel}
    k = 0
    for lab in ClassLabel:
        d = root / lab.dirname
        d.mkdir(parents=True, exist_ok=True)
        for i in range(1, per_class.get(lab, 0) + 1):
            img, m = synthetic_case(lab, size, seed + k)
            k += 1
            cv2.imwrite(str(d / f"{lab.dirname} ({i}).png"), img)
            cv2.imwrite(str(d / f"{lab.dirname} ({i})_mask.png"), m)
    return root
