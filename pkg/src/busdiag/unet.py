"""Modified U-Net for tumour mask segmentation, its loss/metric and training loop."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass
class UNetConfig:
    input_shape: tuple = (128, 128, 3)
    depth: int = 4
    base_filters: int = 64
    learning_rate: float = 1e-4
    epochs: int = 300
    batch_size: int = 16
    select_by: str = "dice"  # "dice" (max val Dice) or "bce" (min val BCE)
    seed: int = 15

    def validate(self) -> None:
        h, w, _ = self.input_shape
        if h % (2 ** self.depth) or w % (2 ** self.depth):
            raise ValueError(f"input size {h}x{w} is not divisible by 2**depth={2 ** self.depth}")
        if self.base_filters < 2 or self.base_filters % 2:
            raise ValueError("base_filters must be an even number >= 2")
        if self.select_by not in ("dice", "bce"):
            raise ValueError("select_by must be 'dice' or 'bce'")

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        if "input_shape" in d:
            d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def _conv(cin: int, cout: int, k: int = 3) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, k, padding="same")
    # he_uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias
    nn.init.kaiming_uniform_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return conv


class _DoubleConv(nn.Sequential):
    """Conv3x3(width) -> ReLU -> Conv3x3(width // 2) -> ReLU."""

    def __init__(self, cin: int, width: int):
        super().__init__(_conv(cin, width), nn.ReLU(inplace=True), _conv(width, width // 2), nn.ReLU(inplace=True))


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        f = cfg.base_filters
        cin = cfg.input_shape[2]
        self.encoders = nn.ModuleList()
        for i in range(cfg.depth):
            self.encoders.append(_DoubleConv(cin, f * 2 ** i))
            cin = f * 2 ** i // 2
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(cin, f * 2 ** cfg.depth)
        cin = f * 2 ** cfg.depth // 2
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            width = f * 2 ** i
            up = nn.ConvTranspose2d(cin, width // 2, kernel_size=2, stride=2)
            nn.init.kaiming_uniform_(up.weight, nonlinearity="relu")
            nn.init.zeros_(up.bias)
            self.ups.append(up)
            self.decoders.append(_DoubleConv(width, width))  # concat(up, skip) has `width` channels
            cin = width // 2
        self.head = nn.Conv2d(cin, 1, kernel_size=1)
        nn.init.xavier_uniform_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.head(x))


def build_unet(cfg: UNetConfig) -> UNet:
    torch.manual_seed(cfg.seed)
    return UNet(cfg)


# ---------------------------------------------------------------- loss/metric

def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_loss(pred, target, eps: float = EPS) -> float:
    """Mean binary cross-entropy over all pixels, predictions clipped to [eps, 1 - eps]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    p = np.clip(pred, eps, 1.0 - eps)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))


def dice_coefficient(pred, target, smooth: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    inter = float((pred * target).sum())
    denom = float(pred.sum() + target.sum())
    if denom + smooth == 0:
        return 1.0  # two empty masks with smooth=0
    return (2.0 * inter + smooth) / (denom + smooth)


def _torch_bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(EPS, 1.0 - EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def _torch_dice(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    inter = (pred * target).sum()
    return (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


# ---------------------------------------------------------------- checkpoint

@dataclass
class SegmentationCheckpoint:
    config: UNetConfig
    state_dict: dict
    epoch: int
    val_bce: float
    val_dice: float
    history: List[dict] = field(default_factory=list)
    preprocess: dict = field(default_factory=dict)
    _model: Optional[UNet] = field(default=None, repr=False, compare=False)

    def model(self) -> UNet:
        if self._model is None:
            net = UNet(self.config)
            net.load_state_dict(self.state_dict)
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
            self._model = net
        return self._model

    def save(self, path) -> None:
        torch.save(
            {
                "kind": "segmentation",
                "config": asdict(self.config),
                "state_dict": self.state_dict,
                "epoch": self.epoch,
                "val_bce": self.val_bce,
                "val_dice": self.val_dice,
                "history": self.history,
                "preprocess": self.preprocess,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "SegmentationCheckpoint":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("kind") != "segmentation":
            raise ValueError(f"{path} is not a segmentation checkpoint")
        return cls(
            config=UNetConfig.from_dict(blob["config"]),
            state_dict=blob["state_dict"],
            epoch=blob["epoch"],
            val_bce=blob["val_bce"],
            val_dice=blob["val_dice"],
            history=blob["history"],
            preprocess=blob.get("preprocess", {}),
        )


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _predict_batches(net: nn.Module, images: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(net(_to_tensor(images[i:i + batch_size])).numpy())
    return np.concatenate(out).transpose(0, 2, 3, 1) if out else np.zeros((0,) + images.shape[1:3] + (1,), np.float32)


def _mean_image_scores(pred: np.ndarray, masks: np.ndarray) -> tuple:
    bces = [bce_loss(p, m) for p, m in zip(pred, masks)]
    dices = [dice_coefficient(p, m) for p, m in zip(pred, masks)]
    return float(np.mean(bces)), float(np.mean(dices))


def train_segmentation(
    train_images: np.ndarray,
    train_masks: np.ndarray,
    val_images: Optional[np.ndarray],
    val_masks: Optional[np.ndarray],
    cfg: UNetConfig,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> SegmentationCheckpoint:
    """Train with Adam on pixelwise BCE and keep the best epoch.

    The best epoch is the one with maximum validation soft Dice (or minimum
    validation BCE when ``cfg.select_by == "bce"``). Without a validation set the
    training metrics are used instead.
    """
    train_images = np.asarray(train_images, dtype=np.float32)
    train_masks = np.asarray(train_masks, dtype=np.float32)
    if len(train_images) == 0:
        raise TrainingError("empty training set")
    if train_images.shape[1:] != tuple(cfg.input_shape):
        raise ValueError(f"training images have shape {train_images.shape[1:]}, expected {cfg.input_shape}")
    has_val = val_images is not None and len(val_images) > 0

    net = build_unet(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    x_all = _to_tensor(train_images)
    y_all = _to_tensor(train_masks)
    n = len(x_all)

    history: List[dict] = []
    best_state, best_epoch, best_key = None, -1, -math.inf
    best_bce, best_dice = math.nan, math.nan
    for epoch in range(cfg.epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        tot_bce = tot_dice = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            pred = net(xb)
            loss = _torch_bce(pred, yb)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}: "
                    f"loss={loss.item()}, pred range=({pred.min().item()}, {pred.max().item()})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_bce += loss.item() * len(idx)
            tot_dice += _torch_dice(pred.detach(), yb).item() * len(idx)
        row = {"epoch": epoch, "train_bce": tot_bce / n, "train_dice": tot_dice / n}
        net.eval()
        if has_val:
            vp = _predict_batches(net, val_images, cfg.batch_size)
            row["val_bce"], row["val_dice"] = _mean_image_scores(vp, val_masks)
        else:
            row["val_bce"], row["val_dice"] = math.nan, math.nan
        history.append(row)
        if on_epoch:
            on_epoch(row)
        log.debug("epoch %d %s", epoch, row)

        bce_ref = row["val_bce"] if has_val else row["train_bce"]
        dice_ref = row["val_dice"] if has_val else row["train_dice"]
        key = dice_ref if cfg.select_by == "dice" else -bce_ref
        if key > best_key:
            best_key, best_epoch = key, epoch
            best_bce, best_dice = bce_ref, dice_ref
            best_state = copy.deepcopy(net.state_dict())

    return SegmentationCheckpoint(
        config=cfg,
        state_dict=best_state,
        epoch=best_epoch,
        val_bce=best_bce,
        val_dice=best_dice,
        history=history,
    )


def predict_mask(ckpt: SegmentationCheckpoint, img: np.ndarray) -> np.ndarray:
    """Probability mask (H x W x 1) for one preprocessed image, or N x H x W x 1 for a batch."""
    img = np.asarray(img, dtype=np.float32)
    single = img.ndim == 3
    batch = img[None] if single else img
    if batch.shape[1:] != tuple(ckpt.config.input_shape):
        raise ValueError(f"expected input of shape {ckpt.config.input_shape}, got {batch.shape[1:]}")
    out = _predict_batches(ckpt.model(), batch, ckpt.config.batch_size)
    return out[0] if single else out
