"""Command-line entry point: ``busdiag {train-seg,train-clf,train,predict,evaluate,report}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .classifier import BackboneKind, ClassifierCheckpoint
from .preprocess import PREPROCESS_MODES

log = logging.getLogger("busdiag")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; flags below override its keys")
    p.add_argument("--dataset", dest="dataset_root", help="dataset root with benign/ malignant/ normal/")
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-ratio", type=float)
    p.add_argument("--subset", type=int, help="use only this many records before splitting")
    p.add_argument("--preprocess", choices=PREPROCESS_MODES)
    p.add_argument("--slic-region-size", type=int)
    p.add_argument("--slic-ruler", type=float)
    p.add_argument("--slic-iters", type=int)
    p.add_argument("--kmeans-k", type=int)
    p.add_argument("--kmeans-eps", type=float)
    p.add_argument("--base-filters", type=int)
    p.add_argument("--seg-epochs", type=int)
    p.add_argument("--seg-batch-size", type=int)
    p.add_argument("--select-by", choices=("dice", "bce"))
    p.add_argument("--backbone", choices=[b.value for b in BackboneKind])
    p.add_argument("--clf-epochs", type=int)
    p.add_argument("--clf-batch-size", type=int)
    p.add_argument("--weights-dir", help="directory holding torchvision ImageNet weight files")
    p.add_argument("--no-pretrained", action="store_true", help="randomly initialised backbone (smoke tests only)")


def build_config(args: argparse.Namespace):
    from .pipeline import PipelineConfig

    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    simple = {"dataset_root", "out_dir", "seed", "split_ratio", "subset", "preprocess", "backbone", "weights_dir"}
    for key in simple:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    nested = {
        "slic_region_size": (cfg.slic, "region_size"),
        "slic_ruler": (cfg.slic, "ruler"),
        "slic_iters": (cfg.slic, "iterations"),
        "kmeans_k": (cfg.kmeans, "k"),
        "kmeans_eps": (cfg.kmeans, "epsilon"),
        "base_filters": (cfg.unet, "base_filters"),
        "seg_epochs": (cfg.unet, "epochs"),
        "seg_batch_size": (cfg.unet, "batch_size"),
        "select_by": (cfg.unet, "select_by"),
        "clf_epochs": (cfg.head, "epochs"),
        "clf_batch_size": (cfg.head, "batch_size"),
    }
    for key, (obj, attr) in nested.items():
        val = getattr(args, key, None)
        if val is not None:
            setattr(obj, attr, val)
    if getattr(args, "seed", None) is not None:
        cfg.unet.seed = cfg.head.seed = args.seed
    if getattr(args, "no_pretrained", False):
        cfg.pretrained = False
    return cfg


def _out_dir(args, default: str = "runs/default") -> Path:
    out = Path(getattr(args, "out_dir", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_ckpts(args, out: Path):
    from .unet import SegmentationCheckpoint

    seg_path = Path(args.seg_ckpt or out / "seg.ckpt")
    clf_path = Path(args.clf_ckpt or out / "clf.ckpt")
    seg = SegmentationCheckpoint.load(seg_path)
    clf = ClassifierCheckpoint.load(clf_path, backbone=args.backbone, weights_dir=args.weights_dir)
    return seg, clf, [seg_path, clf_path]


def cmd_train(args, stages) -> int:
    from .pipeline import run_training

    cfg = build_config(args)
    seg, clf = run_training(cfg, stages)
    if seg is not None:
        print(f"segmentation: best epoch {seg.epoch}  val BCE {seg.val_bce:.4f}  val Dice {seg.val_dice:.4f}")
    if clf is not None:
        print(f"classifier ({clf.backbone.value}): best epoch {clf.best_epoch}  val loss {clf.val_loss:.4f}")
    print(f"artifacts in {cfg.out_dir}")
    return 0


def cmd_predict(args) -> int:
    from .pipeline import run_inference, write_run_manifest

    out = _out_dir(args, "runs/predict")
    seg, clf, ckpt_paths = _load_ckpts(args, Path(args.run_dir or out))
    results = run_inference(args.images, seg, clf, out_dir=out)
    write_run_manifest(out, "predict", None, list(args.images) + ckpt_paths)
    w = csv.writer(sys.stdout, delimiter="\t")
    w.writerow(["id", "label", "p_benign", "p_malignant", "p_normal", "error"])
    for r in results:
        if r.ok:
            w.writerow([r.id, r.label.dirname, *(f"{v:.4f}" for v in r.probabilities.p), ""])
        else:
            w.writerow([r.id, "", "", "", "", r.error])
    return 0 if all(r.ok for r in results) else 2


def cmd_evaluate(args) -> int:
    from .dataset import read_manifest
    from .pipeline import evaluate_records, select_records, write_evaluation, write_run_manifest

    out = _out_dir(args, "runs/default")
    run_dir = Path(args.run_dir or out)
    seg, clf, ckpt_paths = _load_ckpts(args, run_dir)
    if args.records:
        records = read_manifest(args.records)
    elif (run_dir / "test.jsonl").is_file() and not args.dataset_root:
        records = read_manifest(run_dir / "test.jsonl")
    else:
        records = select_records(build_config(args)).test
    report, rows = evaluate_records(records, seg, clf)
    write_evaluation(report, rows, out)
    write_run_manifest(out, "evaluate", None, [r.raw_path for r in records] + ckpt_paths)
    print(report.text_table(), end="")
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    out = _out_dir(args, "runs/report")
    text = build_report(args.eval or [], out, reference=args.reference, curves=args.curves or [])
    print(text, end="")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="busdiag", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (
        ("train-seg", "train the U-Net segmentation stage"),
        ("train-clf", "train the classifier head on ground-truth masks"),
        ("train", "train both stages in sequence"),
    ):
        p = sub.add_parser(name, help=help_)
        _config_args(p)

    def ckpt_args(p):
        p.add_argument("--run-dir", help="training output directory (default location of checkpoints)")
        p.add_argument("--seg-ckpt")
        p.add_argument("--clf-ckpt")

    p = sub.add_parser("predict", help="classify raw ultrasound images")
    _config_args(p)
    ckpt_args(p)
    p.add_argument("images", nargs="+")

    p = sub.add_parser("evaluate", help="score checkpoints on the held-out split")
    _config_args(p)
    ckpt_args(p)
    p.add_argument("--records", help="line-delimited record manifest to evaluate instead of the split")

    p = sub.add_parser("report", help="render tables and figures from evaluation files")
    p.add_argument("--eval", action="append", help="evaluation.json (repeatable; one per model)")
    p.add_argument("--reference", action="store_true", help="include the published reference scores")
    p.add_argument("--curves", action="append", help="training-curve CSV to plot (repeatable)")
    p.add_argument("--out", dest="out_dir")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train-seg":
        return cmd_train(args, ("seg",))
    if args.command == "train-clf":
        return cmd_train(args, ("clf",))
    if args.command == "train":
        return cmd_train(args, ("seg", "clf"))
    if args.command == "predict":
        return cmd_predict(args)
    if args.command == "evaluate":
        return cmd_evaluate(args)
    return cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
