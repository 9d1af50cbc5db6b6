"""Image preprocessing: resize, normalization and unsupervised segmentation.

Two unsupervised segmenters are available. ``slic_segment`` plus
``render_superpixel_means`` produces the superpixel-rendered image that is the
default input to the U-Net; ``kmeanspp_quantize`` is the colour-quantization
alternative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import cv2
import numpy as np
from scipy import ndimage

INPUT_SIZE = 128
PREPROCESS_MODES = ("slic", "kmeanspp", "none")


@dataclass
class SlicConfig:
    region_size: int = 20
    ruler: float = 10.0
    iterations: int = 100
    enforce_connectivity: bool = True
    # colour values are multiplied by this before the distance is taken, so
    # ``ruler`` keeps the meaning it has for 8-bit images
    color_scale: float = 255.0

    def validate(self) -> None:
        if self.region_size < 2:
            raise ValueError("SLIC region_size must be >= 2")
        if self.ruler <= 0:
            raise ValueError("SLIC ruler must be > 0")
        if self.iterations < 1:
            raise ValueError("SLIC iterations must be >= 1")


@dataclass
class KMeansConfig:
    k: int = 4
    max_iterations: int = 100
    epsilon: float = 1e-4

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("K-Means K must be >= 1")
        if self.epsilon < 0:
            raise ValueError("K-Means epsilon must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("K-Means max_iterations must be >= 1")


@dataclass
class SuperpixelLabelMap:
    labels: np.ndarray  # H x W int
    n_labels: int


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective: List[float] = field(default_factory=list)
    iterations: int = 0


def _as_hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {img.shape}")
    return img


def resize_to_input(img: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    img = _as_hwc(img)
    h, w, c = img.shape
    if h == 0 or w == 0:
        raise ValueError("cannot resize an empty image")
    img = img.astype(np.float32, copy=False)
    if (h, w) == (size, size):
        out = img.copy()
    else:
        out = cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)
        if out.ndim == 2:
            out = out[:, :, None]
    return np.clip(out, 0.0, 1.0)


def normalize_pixels(img: np.ndarray) -> np.ndarray:
    """Map pixels to [0, 1]. Byte images (or any float image exceeding 1) are divided by 255."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    out = img.astype(np.float32)
    if out.size and (out.max() > 1.0 or out.min() < 0.0):
        out = out / 255.0
    return np.clip(out, 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear resize then binarize at 0.5; returns size x size x 1 float32."""
    mask = _as_hwc(mask).astype(np.float32)
    if mask.shape[2] != 1:
        mask = mask.mean(axis=2, keepdims=True)
    out = resize_to_input(mask, size)
    return (out >= 0.5).astype(np.float32)


# ----------------------------------------------------------------------- SLIC

def _grid_centers(h: int, w: int, step: int) -> np.ndarray:
    ny = int(math.ceil(h / step))
    nx = int(math.ceil(w / step))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def _gradient_magnitude(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = p[1:-1, 2:] - p[1:-1, :-2]
    dy = p[2:, 1:-1] - p[:-2, 1:-1]
    return (dx ** 2).sum(axis=2) + (dy ** 2).sum(axis=2)


def _perturb_centers(pos: np.ndarray, grad: np.ndarray) -> np.ndarray:
    h, w = grad.shape
    out = pos.copy()
    for i, (y, x) in enumerate(np.round(pos).astype(int)):
        y = min(max(y, 0), h - 1)
        x = min(max(x, 0), w - 1)
        y0, y1 = max(y - 1, 0), min(y + 2, h)
        x0, x1 = max(x - 1, 0), min(x + 2, w)
        win = grad[y0:y1, x0:x1]
        dy, dx = np.unravel_index(np.argmin(win), win.shape)
        out[i] = (y0 + dy, x0 + dx)
    return out


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected piece of every label; merge the rest into neighbours."""
    four = ndimage.generate_binary_structure(2, 1)
    labels = labels.copy()
    while True:
        stray = np.zeros(labels.shape, dtype=bool)
        for lab in np.unique(labels):
            comp, n = ndimage.label(labels == lab, structure=four)
            if n <= 1:
                continue
            sizes = np.bincount(comp.ravel())
            sizes[0] = 0
            keep = np.argmax(sizes)
            stray |= (comp > 0) & (comp != keep)
        if not stray.any():
            break
        pieces, n = ndimage.label(stray, structure=four)
        changed = False
        for piece in range(1, n + 1):
            region = pieces == piece
            ring = ndimage.binary_dilation(region, structure=four) & ~region & ~stray
            if not ring.any():
                continue  # enclosed by other strays; handled on a later pass
            neigh = labels[ring]
            vals, counts = np.unique(neigh, return_counts=True)
            labels[region] = vals[np.argmax(counts)]
            changed = True
        if not changed:  # pragma: no cover - every stray piece touches a kept region
            break
    return labels


def _relabel_consecutive(labels: np.ndarray) -> tuple:
    uniq, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int32), len(uniq)


def slic_segment(img: np.ndarray, cfg: Optional[SlicConfig] = None) -> SuperpixelLabelMap:
    cfg = cfg or SlicConfig()
    cfg.validate()
    img = _as_hwc(img).astype(np.float64)
    h, w, _ = img.shape
    s = int(cfg.region_size)
    if s > h or s > w:
        raise ValueError(f"region_size {s} exceeds image size {h}x{w}")

    color = img * cfg.color_scale
    pos = _perturb_centers(_grid_centers(h, w, s), _gradient_magnitude(color))
    ci = np.clip(np.round(pos).astype(int), 0, [h - 1, w - 1])
    centers_c = color[ci[:, 0], ci[:, 1]].copy()
    centers_p = pos.astype(np.float64)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    spatial_w = (cfg.ruler / s) ** 2
    labels = -np.ones((h, w), dtype=np.int64)
    for _ in range(cfg.iterations):
        dist = np.full((h, w), np.inf)
        new = -np.ones((h, w), dtype=np.int64)
        for k in range(len(centers_p)):
            cy, cx = centers_p[k]
            y0, y1 = max(int(cy - s), 0), min(int(cy + s) + 1, h)
            x0, x1 = max(int(cx - s), 0), min(int(cx + s) + 1, w)
            dc = ((color[y0:y1, x0:x1] - centers_c[k]) ** 2).sum(axis=2)
            ds = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2
            d = dc + ds * spatial_w
            sub = dist[y0:y1, x0:x1]
            better = d < sub
            sub[better] = d[better]
            new[y0:y1, x0:x1][better] = k
        if (new < 0).any():
            # pixels outside every search window go to the spatially nearest centre
            miss = np.nonzero(new < 0)
            d2 = (miss[0][:, None] - centers_p[:, 0]) ** 2 + (miss[1][:, None] - centers_p[:, 1]) ** 2
            new[miss] = np.argmin(d2, axis=1)
        converged = np.array_equal(new, labels)
        labels = new
        if converged:
            break
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers_p)).astype(np.float64)
        nz = counts > 0
        for c in range(color.shape[2]):
            sums = np.bincount(flat, weights=color[:, :, c].ravel(), minlength=len(centers_p))
            centers_c[nz, c] = sums[nz] / counts[nz]
        centers_p[nz, 0] = np.bincount(flat, weights=yy.ravel(), minlength=len(centers_p))[nz] / counts[nz]
        centers_p[nz, 1] = np.bincount(flat, weights=xx.ravel(), minlength=len(centers_p))[nz] / counts[nz]

    if cfg.enforce_connectivity:
        labels = _enforce_connectivity(labels)
    labels, n = _relabel_consecutive(labels)
    return SuperpixelLabelMap(labels=labels, n_labels=n)


def render_superpixel_means(img: np.ndarray, labels: SuperpixelLabelMap) -> np.ndarray:
    img = _as_hwc(img)
    lab = np.asarray(labels.labels)
    if lab.shape != img.shape[:2]:
        raise ValueError(f"label map shape {lab.shape} does not match image {img.shape[:2]}")
    if lab.min() < 0 or lab.max() >= labels.n_labels:
        raise ValueError("label out of range")
    flat = lab.ravel()
    counts = np.bincount(flat, minlength=labels.n_labels).astype(np.float64)
    counts[counts == 0] = 1.0
    out = np.empty(img.shape, dtype=np.float64)
    for c in range(img.shape[2]):
        means = np.bincount(flat, weights=img[:, :, c].astype(np.float64).ravel(), minlength=labels.n_labels) / counts
        out[:, :, c] = means[lab]
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)


# ------------------------------------------------------------------ K-Means++

def kmeanspp_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def kmeanspp_fit(x: np.ndarray, cfg: KMeansConfig, seed: int = 15) -> KMeansResult:
    """K-Means++ seeding followed by Lloyd iterations on the rows of ``x``.

    ``objective`` holds the within-cluster sum of squares after every
    assignment step.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = kmeanspp_seed(x, cfg.k, rng)
    result = KMeansResult(centers=centers, labels=np.zeros(len(x), dtype=np.int64))
    for it in range(cfg.max_iterations):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        result.objective.append(float(d2[np.arange(len(x)), labels].sum()))
        new = centers.copy()
        for j in range(cfg.k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        empty = [j for j in range(cfg.k) if not (labels == j).any()]
        if empty:
            own = ((x - new[labels]) ** 2).sum(axis=1)
            for j in empty:
                far = int(np.argmax(own))
                new[j] = x[far]
                own[far] = -1.0
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        result.labels = labels
        result.iterations = it + 1
        if shift < cfg.epsilon:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    result.labels = np.argmin(d2, axis=1)
    result.centers = centers
    return result


def kmeanspp_quantize(img: np.ndarray, cfg: Optional[KMeansConfig] = None, seed: int = 15) -> np.ndarray:
    cfg = cfg or KMeansConfig()
    img = _as_hwc(img)
    h, w, c = img.shape
    res = kmeanspp_fit(img.reshape(-1, c), cfg, seed)
    out = res.centers[res.labels].reshape(h, w, c)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess_image(
    img: np.ndarray,
    mode: str = "slic",
    slic: Optional[SlicConfig] = None,
    kmeans: Optional[KMeansConfig] = None,
    seed: int = 15,
) -> np.ndarray:
    """Resize to 128x128x3, apply the unsupervised segmenter for ``mode``, normalize."""
    if mode not in PREPROCESS_MODES:
        raise ValueError(f"unknown preprocess mode {mode!r}; expected one of {PREPROCESS_MODES}")
    img = resize_to_input(normalize_pixels(img))
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if mode == "slic":
        img = render_superpixel_means(img, slic_segment(img, slic))
    elif mode == "kmeanspp":
        img = kmeanspp_quantize(img, kmeans, seed)
    return normalize_pixels(img)
