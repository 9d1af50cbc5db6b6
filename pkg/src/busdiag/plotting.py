"""Matplotlib figures written next to the tabular outputs."""
from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
}


@contextmanager
def figure_style():
    with plt.rc_context(STYLE):
        yield


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(history: List[dict], path, metrics=(("train_bce", "val_bce", "Binary cross-entropy"), ("train_dice", "val_dice", "Dice coefficient"))) -> Path:
    """One panel per (train key, val key, label); x axis is the epoch."""
    epochs = [r["epoch"] + 1 for r in history]
    with figure_style():
        fig, axes = plt.subplots(len(metrics), 1, figsize=(6, 3 * len(metrics)), sharex=True)
        axes = np.atleast_1d(axes)
        for ax, (tk, vk, label) in zip(axes, metrics):
            ax.plot(epochs, [r.get(tk, np.nan) for r in history], label="train")
            val = [r.get(vk, np.nan) for r in history]
            if np.isfinite(val).any():
                ax.plot(epochs, val, label="validation")
            ax.set_ylabel(label)
            ax.legend()
        axes[-1].set_xlabel("epoch")
        return _save(fig, path)


def _grouped_bars(ax, groups: Sequence[str], series: Dict[str, Sequence[float]]):
    x = np.arange(len(groups))
    width = 0.8 / max(len(series), 1)
    for i, (name, vals) in enumerate(series.items()):
        bars = ax.bar(x + (i - (len(series) - 1) / 2) * width, vals, width, label=name)
        for b, v in zip(bars, vals):
            ax.annotate(f"{v:.2f}", (b.get_x() + b.get_width() / 2, v), ha="center", va="bottom", fontsize=7)
    ax.set_xticks(x)
    ax.set_xticklabels(groups)


def plot_weighted_scores(reports: Dict[str, object], path) -> Path:
    """Grouped bars of weighted precision/recall/F1 (percent) per model."""
    names = list(reports)
    series = {
        m.capitalize() if m != "f1" else "F1-score": [100 * reports[n].weighted[m] for n in names]
        for m in ("precision", "recall", "f1")
    }
    with figure_style():
        fig, ax = plt.subplots(figsize=(7, 4))
        _grouped_bars(ax, names, series)
        ax.set_ylabel("weighted average (%)")
        ax.set_ylim(0, 100)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_accuracy(reports: Dict[str, object], path) -> Path:
    names = list(reports)
    with figure_style():
        fig, ax = plt.subplots(figsize=(6, 3.5))
        _grouped_bars(ax, names, {"accuracy": [100 * reports[n].accuracy for n in names]})
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        return _save(fig, path)


def plot_class_scores(report, path) -> Path:
    classes = list(report.classes)
    series = {m: [100 * getattr(report.classes[c], m) for c in classes] for m in ("precision", "recall", "f1")}
    with figure_style():
        fig, ax = plt.subplots(figsize=(6, 3.5))
        _grouped_bars(ax, classes, series)
        ax.set_ylabel("score (%)")
        ax.set_ylim(0, 100)
        ax.legend(loc="lower right")
        ax.set_title(report.name or "per-class scores")
        return _save(fig, path)


def plot_confusion(report, path) -> Path:
    m = np.asarray(report.confusion)
    classes = list(report.classes)
    with figure_style():
        fig, ax = plt.subplots(figsize=(3.8, 3.4))
        ax.imshow(m, cmap="Blues")
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                ax.text(j, i, str(m[i, j]), ha="center", va="center")
        ax.set_xticks(range(len(classes)))
        ax.set_xticklabels(classes)
        ax.set_yticks(range(len(classes)))
        ax.set_yticklabels(classes)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        return _save(fig, path)
