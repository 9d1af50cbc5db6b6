"""Two-stage training, automated inference and artifact export."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np
import yaml

from . import __version__
from .classifier import BackboneKind, ClassifierCheckpoint, HeadConfig, ClassProbabilities, predict_proba, train_classifier
from .dataset import (
    ClassLabel,
    DatasetError,
    SampleRecord,
    load_sample,
    read_image,
    scan_dataset,
    split_holdout,
    write_manifest,
)
from .evaluation import EvaluationReport, evaluate_predictions, segmentation_scores, write_per_sample_csv
from .preprocess import KMeansConfig, SlicConfig, preprocess_image, resize_mask
from .unet import SegmentationCheckpoint, UNetConfig, predict_mask, train_segmentation

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    dataset_root: str = "data/Dataset_BUSI_with_GT"
    split_ratio: float = 0.8
    seed: int = 15
    subset: Optional[int] = None  # use only this many records (seeded choice) before splitting
    preprocess: str = "slic"
    slic: SlicConfig = field(default_factory=SlicConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    backbone: str = BackboneKind.VGG16.value
    head: HeadConfig = field(default_factory=HeadConfig)
    weights_dir: Optional[str] = None
    pretrained: bool = True
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet"]["input_shape"] = list(d["unet"]["input_shape"])
        d["head"]["dense_widths"] = list(d["head"]["dense_widths"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "slic" in d:
            d["slic"] = SlicConfig(**d["slic"])
        if "kmeans" in d:
            d["kmeans"] = KMeansConfig(**d["kmeans"])
        if "unet" in d:
            d["unet"] = UNetConfig.from_dict(d["unet"])
        if "head" in d:
            d["head"] = HeadConfig.from_dict(d["head"])
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def preprocess_snapshot(self) -> dict:
        return {"mode": self.preprocess, "slic": asdict(self.slic), "kmeans": asdict(self.kmeans), "seed": self.seed}


def _snapshot_kwargs(snap: dict) -> dict:
    return {
        "mode": snap["mode"],
        "slic": SlicConfig(**snap["slic"]),
        "kmeans": KMeansConfig(**snap["kmeans"]),
        "seed": snap["seed"],
    }


# ------------------------------------------------------------------ manifest

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir, command: str, cfg: Optional[PipelineConfig], inputs: Sequence = ()) -> Path:
    import torch

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(),
        "config_sha256": cfg.digest() if cfg else None,
        "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
        "versions": {
            "busdiag": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "opencv": cv2.__version__,
        },
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


class _Status:
    """status.json that marks a run incomplete until every stage has finished."""

    def __init__(self, out: Path):
        self.path = out / "status.json"
        self.data = {"complete": False, "stages": {}}
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2))

    def run(self, stage: str, fn, *args, **kwargs):
        self.data["stages"][stage] = "running"
        self._write()
        try:
            result = fn(*args, **kwargs)
        except Exception as exc:
            self.data["stages"][stage] = "failed"
            self.data["error"] = f"[{stage}] {type(exc).__name__}: {exc}"
            self._write()
            raise PipelineError(self.data["error"]) from exc
        self.data["stages"][stage] = "done"
        self._write()
        return result

    def finish(self):
        self.data["complete"] = True
        self._write()


# ------------------------------------------------------------------- dataset

def select_records(cfg: PipelineConfig):
    index = scan_dataset(cfg.dataset_root)
    records = index.records
    if cfg.subset is not None and cfg.subset < len(records):
        pick = np.sort(np.random.RandomState(cfg.seed).permutation(len(records))[: cfg.subset])
        records = [records[i] for i in pick]
    return split_holdout(records, cfg.split_ratio, cfg.seed)


def prepare_arrays(records: Sequence[SampleRecord], snap: Optional[dict] = None, images: bool = True) -> dict:
    """Preprocessed images (when ``images``), 128x128 ground-truth masks and labels."""
    out = {"ids": [], "labels": [], "masks": [], "images": []}
    kwargs = _snapshot_kwargs(snap) if images else None
    for rec in records:
        s = load_sample(rec)
        out["ids"].append(rec.id)
        out["labels"].append(int(rec.label))
        out["masks"].append(resize_mask(s.mask))
        if images:
            out["images"].append(preprocess_image(s.image, **kwargs))
    out["masks"] = np.stack(out["masks"]) if out["masks"] else np.zeros((0, 128, 128, 1), np.float32)
    out["images"] = np.stack(out["images"]) if out["images"] else np.zeros((0, 128, 128, 3), np.float32)
    out["labels"] = np.array(out["labels"], dtype=np.int64)
    return out


def write_curves(history: List[dict], path_csv, keys: Sequence[str]) -> None:
    with open(path_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(keys), extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)


# ------------------------------------------------------------------ training

SEG_CURVE_KEYS = ("epoch", "train_bce", "val_bce", "train_dice", "val_dice")
CLF_CURVE_KEYS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")


def _train_seg_stage(cfg: PipelineConfig, split, out: Path) -> SegmentationCheckpoint:
    from .plotting import plot_training_curves

    snap = cfg.preprocess_snapshot()
    tr = prepare_arrays(split.train, snap)
    te = prepare_arrays(split.test, snap)
    log.info("training U-Net on %d images (%d held out)", len(tr["ids"]), len(te["ids"]))
    ckpt = train_segmentation(tr["images"], tr["masks"], te["images"], te["masks"], cfg.unet)
    ckpt.preprocess = snap
    ckpt.save(out / "seg.ckpt")
    write_curves(ckpt.history, out / "seg_curves.csv", SEG_CURVE_KEYS)
    plot_training_curves(ckpt.history, out / "seg_curves.png")
    return ckpt


def _train_clf_stage(cfg: PipelineConfig, split, out: Path) -> ClassifierCheckpoint:
    from .plotting import plot_training_curves

    # the head is fitted on ground-truth masks
    tr = prepare_arrays(split.train, images=False)
    te = prepare_arrays(split.test, images=False)
    log.info("training %s classifier head on %d masks", cfg.backbone, len(tr["ids"]))
    ckpt = train_classifier(
        tr["masks"], tr["labels"], te["masks"], te["labels"],
        backbone=cfg.backbone, cfg=cfg.head, weights_dir=cfg.weights_dir, pretrained=cfg.pretrained,
    )
    ckpt.meta = {"preprocess": cfg.preprocess_snapshot(), "config_sha256": cfg.digest()}
    ckpt.save(out / "clf.ckpt")
    write_curves(ckpt.history, out / "clf_curves.csv", CLF_CURVE_KEYS)
    plot_training_curves(
        ckpt.history, out / "clf_curves.png",
        metrics=(("train_loss", "val_loss", "cross-entropy"), ("train_acc", "val_acc", "accuracy")),
    )
    return ckpt


def run_training(cfg: PipelineConfig, stages: Sequence[str] = ("seg", "clf")) -> tuple:
    """Run the requested training stages; returns ``(seg_ckpt or None, clf_ckpt or None)``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    status = _Status(out)
    cfg.save(out / "config.yaml")
    split = status.run("dataset", select_records, cfg)
    write_manifest(split.train, out / "train.jsonl")
    write_manifest(split.test, out / "test.jsonl")
    seg = clf = None
    if "seg" in stages:
        seg = status.run("segmentation", _train_seg_stage, cfg, split, out)
    if "clf" in stages:
        clf = status.run("classification", _train_clf_stage, cfg, split, out)
    inputs = [r.raw_path for r in split.train + split.test] + [p for r in split.train + split.test for p in r.mask_paths]
    write_run_manifest(out, "train" if len(stages) > 1 else f"train-{stages[0]}", cfg, inputs)
    status.finish()
    return seg, clf


# ----------------------------------------------------------------- inference

@dataclass
class PredictionResult:
    id: str
    path: str
    prob_mask: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    probabilities: Optional[ClassProbabilities] = None
    label: Optional[ClassLabel] = None
    timings: dict = field(default_factory=dict)
    error: Optional[str] = None
    mask_file: Optional[str] = None
    overlay_file: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def check_compatible(seg_ckpt: SegmentationCheckpoint, clf_ckpt: ClassifierCheckpoint) -> None:
    if not seg_ckpt.preprocess:
        raise PipelineError("segmentation checkpoint has no preprocessing snapshot")
    clf_pre = clf_ckpt.meta.get("preprocess")
    if clf_pre and clf_pre.get("mode") != seg_ckpt.preprocess.get("mode"):
        raise PipelineError(
            f"checkpoint mismatch: segmentation used {seg_ckpt.preprocess.get('mode')!r}, classifier run used {clf_pre.get('mode')!r}"
        )


def export_overlays(result: PredictionResult, original: np.ndarray, path=None) -> np.ndarray:
    """Draw the binarized mask outline (red, 1 px) onto ``original``; optionally write it as PNG."""
    img = np.asarray(original, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    canvas = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    h, w = canvas.shape[:2]
    m = np.asarray(result.mask, dtype=np.uint8).reshape(result.mask.shape[:2])
    if m.shape != (h, w):
        m = cv2.resize(m, (w, h), interpolation=cv2.INTER_NEAREST)
    contours, _ = cv2.findContours(m, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    if contours:
        canvas = np.ascontiguousarray(canvas)
        cv2.drawContours(canvas, contours, -1, (255, 0, 0), 1)
    if path is not None:
        cv2.imwrite(str(path), cv2.cvtColor(canvas, cv2.COLOR_RGB2BGR))
        result.overlay_file = str(path)
    return canvas


def _write_mask_png(mask: np.ndarray, path) -> None:
    cv2.imwrite(str(path), (mask[:, :, 0] * 255).astype(np.uint8))


def run_inference(
    inputs: Sequence,
    seg_ckpt: SegmentationCheckpoint,
    clf_ckpt: ClassifierCheckpoint,
    out_dir=None,
) -> List[PredictionResult]:
    """Classify raw ultrasound images; one result per input, in input order.

    Each image is preprocessed with the mode stored in the segmentation
    checkpoint, segmented, and the probability mask is classified. Unreadable
    files yield a result carrying ``error`` and the batch continues.
    """
    check_compatible(seg_ckpt, clf_ckpt)
    kwargs = _snapshot_kwargs(seg_ckpt.preprocess)
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "masks").mkdir(parents=True, exist_ok=True)
        (out / "overlays").mkdir(parents=True, exist_ok=True)
    results = []
    for item in inputs:
        if isinstance(item, np.ndarray):
            path, ident, raw = "", f"array{len(results)}", item
        else:
            path, ident, raw = str(item), Path(item).stem, None
        res = PredictionResult(id=ident, path=path)
        try:
            t0 = time.perf_counter()
            if raw is None:
                raw = read_image(path)
            img = preprocess_image(raw, **kwargs)
            t1 = time.perf_counter()
            res.prob_mask = predict_mask(seg_ckpt, img)
            res.mask = (res.prob_mask >= 0.5).astype(np.float32)
            t2 = time.perf_counter()
            p = predict_proba(clf_ckpt, res.prob_mask[None])[0]
            t3 = time.perf_counter()
            res.probabilities = ClassProbabilities(p)
            res.label = res.probabilities.label
            res.timings = {"preprocess": t1 - t0, "segment": t2 - t1, "classify": t3 - t2}
            if out:
                res.mask_file = str(out / "masks" / f"{ident}_pred_mask.png")
                _write_mask_png(res.mask, res.mask_file)
                _write_mask_png(res.prob_mask, out / "masks" / f"{ident}_pred_prob.png")
                export_overlays(res, raw, out / "overlays" / f"{ident}_overlay.png")
        except (DatasetError, OSError, ValueError) as exc:
            res.error = f"{type(exc).__name__}: {exc}"
            log.warning("failed on %s: %s", path or ident, res.error)
        results.append(res)
    if out:
        write_results_csv(results, out / "predictions.csv")
    return results


def write_results_csv(results: Sequence[PredictionResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "label", "p_benign", "p_malignant", "p_normal", "mask_file", "error"])
        for r in results:
            p = r.probabilities.p if r.probabilities is not None else [""] * 3
            w.writerow([r.id, r.path, r.label.dirname if r.label is not None else "", *p, r.mask_file or "", r.error or ""])


# ---------------------------------------------------------------- evaluation

def evaluate_records(
    records: Sequence[SampleRecord],
    seg_ckpt: SegmentationCheckpoint,
    clf_ckpt: ClassifierCheckpoint,
    name: str = "",
) -> tuple:
    """Run the inference path over labelled records; returns ``(EvaluationReport, per-sample rows)``."""
    if not records:
        raise ValueError("empty test set")
    check_compatible(seg_ckpt, clf_ckpt)
    data = prepare_arrays(records, seg_ckpt.preprocess)
    probs_masks = predict_mask(seg_ckpt, data["images"])
    seg = segmentation_scores(probs_masks, data["masks"])
    probs = predict_proba(clf_ckpt, probs_masks)
    preds = probs.argmax(axis=1)
    report = evaluate_predictions(preds, data["labels"], name=name or clf_ckpt.backbone.value)
    report.segmentation = {"bce": seg["bce"], "dice": seg["dice"]}
    rows = []
    for i, ident in enumerate(data["ids"]):
        rows.append({
            "id": ident,
            "truth": ClassLabel(int(data["labels"][i])).dirname,
            "pred": ClassLabel(int(preds[i])).dirname,
            "p_benign": float(probs[i, 0]),
            "p_malignant": float(probs[i, 1]),
            "p_normal": float(probs[i, 2]),
            "dice": seg["per_image_dice"][i],
        })
    return report, rows


def write_evaluation(report: EvaluationReport, rows: List[dict], out_dir) -> None:
    from .plotting import plot_class_scores, plot_confusion

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "evaluation.json")
    (out / "evaluation.txt").write_text(report.text_table())
    write_per_sample_csv(rows, out / "per_sample.csv")
    plot_class_scores(report, out / "class_scores.png")
    plot_confusion(report, out / "confusion.png")
