"""Multi-model report: delimited tables plus figures in one output directory."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Sequence

from . import reference as ref
from .evaluation import EvaluationReport
from .plotting import plot_accuracy, plot_training_curves, plot_weighted_scores

_SHORT = {"benign": "B", "malignant": "M", "normal": "N"}


def _load_reports(paths: Sequence, reference: bool) -> Dict[str, EvaluationReport]:
    reports: Dict[str, EvaluationReport] = {}
    if reference:
        for backbone in ref.CLASS_SCORES:
            reports[f"reference {backbone}"] = ref.reference_report(backbone)
    for p in paths:
        rep = EvaluationReport.load_json(p)
        name = rep.name or Path(p).parent.name
        while name in reports:
            name += "'"
        reports[name] = rep
    return reports


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _aligned(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    return "\n".join(lines) + "\n"


def build_report(eval_paths: Sequence, out_dir, reference: bool = False, curves: Sequence = ()) -> str:
    """Write class-score, SD, weighted-average and segmentation tables (CSV + text) and figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = _load_reports(eval_paths, reference)
    names = list(reports)
    text = []

    if reports:
        header = ["metric"] + names
        rows = []
        for cls in ("benign", "malignant", "normal"):
            for metric, label in (("precision", "Precision"), ("recall", "Recall"), ("f1", "F1-Score")):
                rows.append([f"{label} ({_SHORT[cls]})"] + [f"{100 * getattr(reports[n].classes[cls], metric):.2f}%" for n in names])
        _write_csv(out / "class_scores.csv", header, rows)
        text += ["Per-class scores", _aligned(header, rows)]

        header = ["model", "SD of F1", "SD of precision", "SD of recall"]
        rows = [[n, f"{reports[n].sd['f1']:.4f}", f"{reports[n].sd['precision']:.4f}", f"{reports[n].sd['recall']:.4f}"] for n in names]
        _write_csv(out / "class_sd.csv", header, rows)
        text += ["Standard deviation across classes", _aligned(header, rows)]

        header = ["model", "weighted precision", "weighted recall", "weighted F1", "accuracy"]
        rows = [
            [n] + [f"{100 * reports[n].weighted[m]:.2f}%" for m in ("precision", "recall", "f1")] + [f"{100 * reports[n].accuracy:.2f}%"]
            for n in names
        ]
        _write_csv(out / "weighted.csv", header, rows)
        text += ["Weighted averages", _aligned(header, rows)]

        plot_weighted_scores(reports, out / "weighted_scores.png")
        plot_accuracy(reports, out / "accuracy.png")

    seg_rows = []
    if reference:
        seg_rows += [[f"reference {mode}", f"{b:.4f}", f"{d:.2f}"] for mode, (b, d) in ref.SEGMENTATION.items()]
    seg_rows += [[n, f"{r.segmentation['bce']:.4f}", f"{100 * r.segmentation['dice']:.2f}"] for n, r in reports.items() if r.segmentation]
    if seg_rows:
        header = ["method", "BCE loss", "Dice score"]
        _write_csv(out / "segmentation.csv", header, seg_rows)
        text += ["Segmentation", _aligned(header, seg_rows)]

    for c in curves:
        c = Path(c)
        with open(c) as fh:
            hist = [{k: float(v) if v not in ("", None) else float("nan") for k, v in row.items()} for row in csv.DictReader(fh)]
        for row in hist:
            row["epoch"] = int(row["epoch"])
        if hist and "train_bce" in hist[0]:
            plot_training_curves(hist, out / f"{c.stem}.png")
        elif hist:
            plot_training_curves(hist, out / f"{c.stem}.png", metrics=(("train_loss", "val_loss", "cross-entropy"), ("train_acc", "val_acc", "accuracy")))

    body = "\n".join(text)
    (out / "report.txt").write_text(body)
    return body
