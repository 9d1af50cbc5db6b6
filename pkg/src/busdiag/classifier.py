"""Frozen ImageNet backbone + tanh dense head mapping masks to class probabilities."""
from __future__ import annotations

import copy
import enum
import hashlib
import logging
import math
import os
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torchvision import models

from .dataset import ClassLabel

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class BackboneKind(str, enum.Enum):
    VGG16 = "vgg16"
    VGG19 = "vgg19"
    RESNET50 = "resnet50"
    DENSENET121 = "densenet121"


WEIGHT_FILES = {
    BackboneKind.VGG16: "vgg16-397923af.pth",
    BackboneKind.VGG19: "vgg19-dcbb9e9d.pth",
    BackboneKind.RESNET50: "resnet50-0676ba61.pth",
    BackboneKind.DENSENET121: "densenet121-a639ec97.pth",
}

# (channels, total stride) of the last convolutional stage
_BACKBONE_OUT = {
    BackboneKind.VGG16: (512, 32),
    BackboneKind.VGG19: (512, 32),
    BackboneKind.RESNET50: (2048, 32),
    BackboneKind.DENSENET121: (1024, 32),
}

_DENSENET_KEY = re.compile(r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$")


def default_weights_dir() -> Path:
    return Path(os.environ.get("BUSDIAG_WEIGHTS", Path(torch.hub.get_dir()) / "checkpoints"))


def feature_dim(kind: BackboneKind | str, input_size: int = 128) -> int:
    channels, stride = _BACKBONE_OUT[BackboneKind(kind)]
    side = input_size // stride
    return channels * side * side


def _conv_stages(kind: BackboneKind) -> nn.Module:
    if kind == BackboneKind.VGG16:
        return models.vgg16(weights=None)
    if kind == BackboneKind.VGG19:
        return models.vgg19(weights=None)
    if kind == BackboneKind.RESNET50:
        return models.resnet50(weights=None)
    return models.densenet121(weights=None)


def _strip_head(kind: BackboneKind, net: nn.Module) -> nn.Module:
    if kind in (BackboneKind.VGG16, BackboneKind.VGG19):
        return net.features
    if kind == BackboneKind.RESNET50:
        return nn.Sequential(*list(net.children())[:-2])
    return nn.Sequential(net.features, nn.ReLU())


def build_backbone(
    kind: BackboneKind | str,
    weights_dir: Optional[os.PathLike] = None,
    pretrained: bool = True,
    seed: int = 0,
) -> tuple:
    """Return ``(module, source)`` for the frozen convolutional stages.

    With ``pretrained`` the ImageNet state dict is read from ``weights_dir``
    (torchvision file names); ``source`` then records the file digest.
    Otherwise the stages are randomly initialised from ``seed`` and ``source``
    is ``"random:<seed>"`` so the same module can be rebuilt later.
    """
    kind = BackboneKind(kind)
    if pretrained:
        path = Path(weights_dir or default_weights_dir()) / WEIGHT_FILES[kind]
        if not path.is_file():
            raise FileNotFoundError(f"pretrained weights for {kind.value} not found; expected {path}")
        net = _conv_stages(kind)
        state = torch.load(path, map_location="cpu", weights_only=True)
        if kind == BackboneKind.DENSENET121:
            for key in list(state):
                m = _DENSENET_KEY.match(key)
                if m:
                    state[m.group(1) + m.group(2)] = state.pop(key)
        net.load_state_dict(state)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        source = f"imagenet:{path.name}:{digest}"
    else:
        torch.manual_seed(seed)
        net = _conv_stages(kind)
        source = f"random:{seed}"
    body = _strip_head(kind, net).eval()
    for p in body.parameters():
        p.requires_grad_(False)
    return body, source


def mask_to_classifier_input(mask: np.ndarray) -> np.ndarray:
    """128x128x1 mask -> 128x128x3, ImageNet mean/std scaled (torchvision convention)."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim != 3 or mask.shape[2] != 1:
        raise ValueError(f"expected an H x W x 1 mask, got shape {mask.shape}")
    rgb = np.repeat(mask, 3, axis=2)
    return (rgb - IMAGENET_MEAN) / IMAGENET_STD


def extract_features(backbone: nn.Module, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Flattened last-stage feature maps for backbone-scaled images (N x 128 x 128 x 3 or one image)."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size].transpose(0, 3, 1, 2)))
            out.append(torch.flatten(backbone(x), 1).numpy())
    feats = np.concatenate(out)
    return feats[0] if single else feats


def tanh_activation(x):
    x = np.asarray(x, dtype=np.float64)
    # (e^x - e^-x) / (e^x + e^-x) == (1 - e^-2|x|) / (1 + e^-2|x|) * sign(x), which cannot overflow
    e = np.exp(-2.0 * np.abs(x))
    out = np.sign(x) * (1.0 - e) / (1.0 + e)
    return float(out) if out.ndim == 0 else out


@dataclass
class HeadConfig:
    dense_widths: tuple = (1024, 1024, 512, 256, 128)
    dropout_rate: float = 0.2
    n_classes: int = 3
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    seed: int = 15

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        if "dense_widths" in d:
            d["dense_widths"] = tuple(d["dense_widths"])
        return cls(**d)


class ClassifierHead(nn.Module):
    """Five tanh dense layers, dropout between the first two, linear 3-way output.

    ``forward`` returns logits; softmax is applied by ``predict_proba`` and by
    the cross-entropy loss during training.
    """

    def __init__(self, cfg: HeadConfig, feature_dim: int):
        super().__init__()
        if len(cfg.dense_widths) != 5:
            raise ValueError(f"head needs exactly 5 dense widths, got {len(cfg.dense_widths)}")
        layers: List[nn.Module] = []
        cin = feature_dim
        for i, width in enumerate(cfg.dense_widths):
            lin = nn.Linear(cin, width)
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)
            layers += [lin, nn.Tanh()]
            if i == 0:
                layers.append(nn.Dropout(cfg.dropout_rate))
            cin = width
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(cin, cfg.n_classes)
        # zero output layer: an untrained head predicts the uniform distribution
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.body(x))

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=1)


def build_head(cfg: HeadConfig, feature_dim: int) -> ClassifierHead:
    torch.manual_seed(cfg.seed)
    return ClassifierHead(cfg, feature_dim)


@dataclass
class ClassProbabilities:
    p: np.ndarray

    @property
    def label(self) -> ClassLabel:
        return ClassLabel(int(np.argmax(self.p)))


@dataclass
class ClassifierCheckpoint:
    backbone: BackboneKind
    backbone_source: str
    config: HeadConfig
    feature_dim: int
    head_state: dict
    feature_mean: np.ndarray
    feature_std: np.ndarray
    best_epoch: int
    val_loss: float
    history: List[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    weights_dir: Optional[str] = field(default=None, compare=False)
    _model: Optional[tuple] = field(default=None, repr=False, compare=False)

    def model(self) -> tuple:
        """(backbone, head) in eval mode; the backbone is rebuilt from ``backbone_source``."""
        if self._model is None:
            if self.backbone_source.startswith("random:"):
                backbone, _ = build_backbone(self.backbone, pretrained=False, seed=int(self.backbone_source.split(":")[1]))
            else:
                backbone, source = build_backbone(self.backbone, self.weights_dir, pretrained=True)
                if source != self.backbone_source:
                    raise ValueError(f"backbone weights differ from training: {source} != {self.backbone_source}")
            head = ClassifierHead(self.config, self.feature_dim)
            head.load_state_dict(self.head_state)
            head.eval()
            self._model = (backbone, head)
        return self._model

    def save(self, path) -> None:
        torch.save(
            {
                "kind": "classifier",
                "backbone": self.backbone.value,
                "backbone_source": self.backbone_source,
                "config": asdict(self.config),
                "feature_dim": self.feature_dim,
                "head_state": self.head_state,
                "feature_mean": self.feature_mean,
                "feature_std": self.feature_std,
                "best_epoch": self.best_epoch,
                "val_loss": self.val_loss,
                "history": self.history,
                "meta": self.meta,
            },
            path,
        )

    @classmethod
    def load(cls, path, backbone: Optional[str] = None, weights_dir=None) -> "ClassifierCheckpoint":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("kind") != "classifier":
            raise ValueError(f"{path} is not a classifier checkpoint")
        kind = BackboneKind(blob["backbone"])
        if backbone is not None and BackboneKind(backbone) != kind:
            raise ValueError(f"checkpoint was trained with backbone {kind.value}, runtime requested {backbone}")
        return cls(
            backbone=kind,
            backbone_source=blob["backbone_source"],
            config=HeadConfig.from_dict(blob["config"]),
            feature_dim=blob["feature_dim"],
            head_state=blob["head_state"],
            feature_mean=blob["feature_mean"],
            feature_std=blob["feature_std"],
            best_epoch=blob["best_epoch"],
            val_loss=blob["val_loss"],
            history=blob["history"],
            meta=blob.get("meta", {}),
            weights_dir=str(weights_dir) if weights_dir else None,
        )


def _features_for_masks(backbone: nn.Module, masks: np.ndarray, batch_size: int) -> np.ndarray:
    inputs = np.stack([mask_to_classifier_input(m) for m in masks])
    return extract_features(backbone, inputs, batch_size)


def _ce(head: ClassifierHead, x: torch.Tensor, y: torch.Tensor) -> float:
    with torch.no_grad():
        return nn.functional.cross_entropy(head(x), y).item()


def train_classifier(
    train_masks: np.ndarray,
    train_labels: Sequence,
    val_masks: Optional[np.ndarray],
    val_labels: Optional[Sequence],
    backbone: BackboneKind | str = BackboneKind.VGG16,
    cfg: Optional[HeadConfig] = None,
    weights_dir: Optional[os.PathLike] = None,
    pretrained: bool = True,
    backbone_module: Optional[nn.Module] = None,
    backbone_source: Optional[str] = None,
) -> ClassifierCheckpoint:
    """Extract features once with the frozen backbone, then fit the dense head.

    Loss is categorical cross-entropy on one-hot targets; the kept epoch is the
    one with lowest validation loss (training loss without a validation set).
    """
    cfg = cfg or HeadConfig()
    kind = BackboneKind(backbone)
    train_masks = np.asarray(train_masks, dtype=np.float32)
    if len(train_masks) == 0:
        raise ValueError("empty training set")
    y_train = np.array([int(ClassLabel.parse(l)) for l in train_labels])
    missing = [c.dirname for c in ClassLabel if c not in set(y_train.tolist())]
    if missing:
        warnings.warn(f"classes absent from the training set: {missing}")

    if backbone_module is None:
        backbone_module, backbone_source = build_backbone(kind, weights_dir, pretrained, seed=cfg.seed)
    elif backbone_source is None:
        raise ValueError("backbone_source is required with an explicit backbone_module")

    f_train = _features_for_masks(backbone_module, train_masks, cfg.batch_size)
    mean = f_train.mean(axis=0)
    std = f_train.std(axis=0) + 1e-6
    x_train = torch.from_numpy((f_train - mean) / std).float()
    t_train = torch.from_numpy(y_train).long()
    has_val = val_masks is not None and len(val_masks) > 0
    if has_val:
        f_val = _features_for_masks(backbone_module, np.asarray(val_masks, dtype=np.float32), cfg.batch_size)
        x_val = torch.from_numpy((f_val - mean) / std).float()
        t_val = torch.from_numpy(np.array([int(ClassLabel.parse(l)) for l in val_labels])).long()

    head = build_head(cfg, x_train.shape[1])
    opt = torch.optim.Adam(head.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(x_train)
    history = []
    best = (math.inf, -1, None)
    for epoch in range(cfg.epochs):
        head.train()
        order = torch.randperm(n, generator=gen)
        total, correct = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            logits = head(x_train[idx])
            loss = nn.functional.cross_entropy(logits, t_train[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == t_train[idx]).sum())
        head.eval()
        row = {"epoch": epoch, "train_loss": total / n, "train_acc": correct / n}
        if has_val:
            with torch.no_grad():
                logits = head(x_val)
            row["val_loss"] = nn.functional.cross_entropy(logits, t_val).item()
            row["val_acc"] = float((logits.argmax(1) == t_val).float().mean())
        else:
            row["val_loss"] = row["val_acc"] = math.nan
        history.append(row)
        ref = row["val_loss"] if has_val else _ce(head, x_train, t_train)
        if ref < best[0]:
            best = (ref, epoch, copy.deepcopy(head.state_dict()))

    return ClassifierCheckpoint(
        backbone=kind,
        backbone_source=backbone_source,
        config=cfg,
        feature_dim=int(x_train.shape[1]),
        head_state=best[2],
        feature_mean=mean,
        feature_std=std,
        best_epoch=best[1],
        val_loss=best[0],
        history=history,
        weights_dir=str(weights_dir) if weights_dir else None,
    )


def predict_proba(ckpt: ClassifierCheckpoint, masks: np.ndarray) -> np.ndarray:
    """N x 3 class probabilities for N x 128 x 128 x 1 masks."""
    backbone, head = ckpt.model()
    masks = np.asarray(masks, dtype=np.float32)
    feats = _features_for_masks(backbone, masks, ckpt.config.batch_size)
    if feats.shape[1] != ckpt.feature_dim:
        raise ValueError(f"feature size {feats.shape[1]} does not match checkpoint ({ckpt.feature_dim})")
    x = torch.from_numpy((feats - ckpt.feature_mean) / ckpt.feature_std).float()
    with torch.no_grad():
        return head.predict_proba(x).double().numpy()


def predict_class(ckpt: ClassifierCheckpoint, mask: np.ndarray) -> ClassProbabilities:
    return ClassProbabilities(p=predict_proba(ckpt, np.asarray(mask)[None])[0])
