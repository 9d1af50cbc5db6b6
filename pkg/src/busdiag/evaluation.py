"""Classification and segmentation metrics, report assembly and export."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .dataset import ClassLabel
from .unet import bce_loss, dice_coefficient

CLASSES = list(ClassLabel)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class ConfusionCounts:
    per_class: Dict[ClassLabel, Counts]
    matrix: np.ndarray  # rows truth, columns prediction

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.matrix))

    def __getitem__(self, label) -> Counts:
        return self.per_class[ClassLabel.parse(label)]


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int
    undefined: List[str] = field(default_factory=list)


def confusion_counts(preds: Sequence, truths: Sequence) -> ConfusionCounts:
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} truths")
    if len(preds) == 0:
        raise ValueError("no predictions")
    p = [int(ClassLabel.parse(x)) for x in preds]
    t = [int(ClassLabel.parse(x)) for x in truths]
    k = len(CLASSES)
    matrix = np.zeros((k, k), dtype=np.int64)
    for ti, pi in zip(t, p):
        matrix[ti, pi] += 1
    n = int(matrix.sum())
    per = {}
    for c in CLASSES:
        tp = int(matrix[c, c])
        fp = int(matrix[:, c].sum()) - tp
        fn = int(matrix[c, :].sum()) - tp
        per[c] = Counts(tp=tp, fp=fp, fn=fn, tn=n - tp - fp - fn)
    return ConfusionCounts(per_class=per, matrix=matrix)


def _ratio(num: float, den: float) -> tuple:
    return (num / den, False) if den else (0.0, True)


def class_scores(c: Counts) -> ClassScores:
    undefined = []
    precision, bad = _ratio(c.tp, c.tp + c.fp)
    if bad:
        undefined.append("precision")
    recall, bad = _ratio(c.tp, c.tp + c.fn)
    if bad:
        undefined.append("recall")
    f1, bad = _ratio(2 * precision * recall, precision + recall)
    if bad:
        undefined.append("f1")
    return ClassScores(precision, recall, f1, support=c.tp + c.fn, undefined=undefined)


def prf_accuracy(counts: ConfusionCounts) -> tuple:
    """Return ``(accuracy, {label: ClassScores})``."""
    scores = {c: class_scores(counts.per_class[c]) for c in CLASSES}
    return counts.correct / counts.total, scores


def f1_from(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def weighted_average(scores: Dict[ClassLabel, ClassScores] | Sequence[ClassScores]) -> tuple:
    """Support-weighted precision, recall and F1."""
    items = list(scores.values()) if isinstance(scores, dict) else list(scores)
    w = np.array([s.support for s in items], dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("weighted average needs positive total support")
    out = []
    for attr in ("precision", "recall", "f1"):
        v = np.array([getattr(s, attr) for s in items], dtype=np.float64)
        out.append(float((w * v).sum() / w.sum()))
    return tuple(out)


def class_consistency_sd(values: Sequence[float]) -> float:
    """Sample standard deviation (n - 1 divisor) of per-class values."""
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=1))


@dataclass
class EvaluationReport:
    accuracy: float
    classes: Dict[str, ClassScores]
    weighted: Dict[str, float]
    sd: Dict[str, float]
    confusion: List[List[int]]
    segmentation: Optional[Dict[str, float]] = None
    name: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EvaluationReport":
        d = dict(d)
        d["classes"] = {k: ClassScores(**v) for k, v in d["classes"].items()}
        return cls(**d)

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load_json(cls, path) -> "EvaluationReport":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def text_table(self) -> str:
        lines = []
        title = f"Classification scores{f' ({self.name})' if self.name else ''}"
        lines.append(title)
        lines.append(f"{'class':<11}{'precision':>11}{'recall':>9}{'f1':>9}{'support':>9}")
        for name, s in self.classes.items():
            flag = " *" if s.undefined else ""
            lines.append(f"{name:<11}{s.precision:>11.2%}{s.recall:>9.2%}{s.f1:>9.2%}{s.support:>9d}{flag}")
        w = self.weighted
        lines.append(f"{'weighted':<11}{w['precision']:>11.2%}{w['recall']:>9.2%}{w['f1']:>9.2%}")
        lines.append(f"accuracy {self.accuracy:.2%}")
        lines.append(f"SD across classes  f1 {self.sd['f1']:.4f}  precision {self.sd['precision']:.4f}  recall {self.sd['recall']:.4f}")
        if self.segmentation:
            lines.append(f"segmentation  BCE {self.segmentation['bce']:.4f}  Dice {100 * self.segmentation['dice']:.2f}")
        if any(s.undefined for s in self.classes.values()):
            lines.append("* zero denominator; value reported as 0")
        return "\n".join(lines) + "\n"


def report_from_scores(scores: Dict[ClassLabel, ClassScores], accuracy: float, confusion=None, name: str = "") -> EvaluationReport:
    wp, wr, wf = weighted_average(scores)
    ordered = [scores[c] for c in CLASSES]
    return EvaluationReport(
        accuracy=accuracy,
        classes={c.dirname: scores[c] for c in CLASSES},
        weighted={"precision": wp, "recall": wr, "f1": wf},
        sd={
            "f1": class_consistency_sd([s.f1 for s in ordered]),
            "precision": class_consistency_sd([s.precision for s in ordered]),
            "recall": class_consistency_sd([s.recall for s in ordered]),
        },
        confusion=[list(map(int, row)) for row in (confusion if confusion is not None else np.zeros((3, 3), int))],
        name=name,
    )


def evaluate_predictions(preds: Sequence, truths: Sequence, name: str = "") -> EvaluationReport:
    counts = confusion_counts(preds, truths)
    acc, scores = prf_accuracy(counts)
    return report_from_scores(scores, acc, counts.matrix, name)


def segmentation_scores(pred_masks: Iterable[np.ndarray], true_masks: Iterable[np.ndarray], threshold: Optional[float] = 0.5) -> dict:
    """Per-image BCE (on probabilities) and Dice (on masks binarized at ``threshold``), averaged."""
    bces, dices = [], []
    for p, t in zip(pred_masks, true_masks):
        bces.append(bce_loss(p, t))
        q = (np.asarray(p) >= threshold).astype(np.float64) if threshold is not None else p
        dices.append(dice_coefficient(q, t))
    if not bces:
        raise ValueError("empty test set")
    return {"bce": float(np.mean(bces)), "dice": float(np.mean(dices)), "per_image_dice": dices}


def segmentation_report(ckpt, images: np.ndarray, masks: np.ndarray, threshold: Optional[float] = 0.5) -> tuple:
    """(mean BCE, mean Dice) of a segmentation checkpoint over preprocessed images."""
    from .unet import predict_mask

    if len(images) == 0:
        raise ValueError("empty test set")
    preds = predict_mask(ckpt, np.asarray(images))
    s = segmentation_scores(preds, masks, threshold)
    return s["bce"], s["dice"]


def write_per_sample_csv(rows: List[dict], path) -> None:
    fields = ["id", "truth", "pred", "p_benign", "p_malignant", "p_normal", "dice"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ------------------------------------------------- support-count consistency

def consistent_counts(percentages: Sequence[float], max_n: int, decimals: int = 2) -> List[int]:
    """Class sizes n <= max_n for which every percentage equals round(100 k / n) for some k."""
    out = []
    for n in range(1, max_n + 1):
        ks = np.arange(n + 1)
        achievable = set(np.round(100.0 * ks / n, decimals).tolist())
        if all(round(p, decimals) in achievable for p in percentages):
            out.append(n)
    return out


def consistent_supports(recalls_by_class: Sequence[Sequence[float]], max_total: int = 200, decimals: int = 2) -> List[tuple]:
    """Every class-size tuple (total <= max_total) consistent with the given recall percentages.

    ``recalls_by_class[c]`` lists the recall percentages reported for class ``c``
    across models.
    """
    options = [consistent_counts(r, max_total, decimals) for r in recalls_by_class]
    return [t for t in itertools.product(*options) if sum(t) <= max_total]


def accuracy_consistent(supports: Sequence[int], recalls: Sequence[float], accuracy: float, decimals: int = 2) -> bool:
    """Whether the correct-prediction count implied by per-class recalls reproduces ``accuracy`` (percent)."""
    correct = sum(int(round(r / 100.0 * n)) for r, n in zip(recalls, supports))
    return round(100.0 * correct / sum(supports), decimals) == round(accuracy, decimals)


def classification_report(clf_ckpt, seg_ckpt, records, name: str = "") -> EvaluationReport:
    """Full inference path (preprocess, segment, classify) over labelled records."""
    from .pipeline import evaluate_records

    report, _ = evaluate_records(records, seg_ckpt, clf_ckpt, name=name)
    return report
