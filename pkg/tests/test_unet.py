import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from busdiag.synthetic import synthetic_arrays
from busdiag.unet import (
    SegmentationCheckpoint,
    TrainingError,
    UNetConfig,
    bce_loss,
    build_unet,
    dice_coefficient,
    predict_mask,
    train_segmentation,
)

TINY = UNetConfig(base_filters=4, epochs=1, batch_size=4)


# ------------------------------------------------------------------- BCE

def test_bce_perfect_prediction():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    assert bce_loss(y, y) <= 1e-6


def test_bce_half_probability_is_ln2():
    assert bce_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-6)


def test_bce_single_pixel():
    assert bce_loss([0.25], [1]) == pytest.approx(-math.log(0.25), abs=1e-9)


def test_bce_clips_extremes():
    assert math.isfinite(bce_loss([0.0, 1.0], [1.0, 0.0]))


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(
    p=arrays(np.float64, 16, elements=st.floats(0, 1)),
    y=arrays(np.float64, 16, elements=st.sampled_from([0.0, 1.0])),
)
def test_bce_non_negative(p, y):
    assert bce_loss(p, y) >= 0


# ------------------------------------------------------------------ Dice

def test_dice_identical_masks():
    m = np.zeros((128, 128, 1))
    m[30:70, 40:90] = 1
    assert dice_coefficient(m, m) == pytest.approx(1.0, abs=1e-3)


def test_dice_disjoint_masks():
    a = np.zeros(400)
    b = np.zeros(400)
    a[:100] = 1
    b[200:300] = 1
    assert dice_coefficient(a, b) == pytest.approx(1 / 201)


def test_dice_partial_overlap():
    a = np.array([1, 1, 1, 1, 0, 0], float)
    b = np.array([1, 1, 0, 0, 0, 0], float)
    assert dice_coefficient(a, b) == pytest.approx(5 / 7)
    assert dice_coefficient(a, b, smooth=0) == pytest.approx(2 / 3, abs=1e-9)


def test_dice_empty_masks():
    z = np.zeros((8, 8, 1))
    assert dice_coefficient(z, z, smooth=1.0) == 1.0


@settings(max_examples=100, deadline=None)
@given(
    a=arrays(np.float64, 20, elements=st.floats(0, 1)),
    b=arrays(np.float64, 20, elements=st.floats(0, 1)),
)
def test_dice_range_and_symmetry(a, b):
    d = dice_coefficient(a, b)
    assert 0 < d <= 1 + 1e-12
    assert d == pytest.approx(dice_coefficient(b, a))


# ------------------------------------------------------------- architecture

def test_unet_output_shape_and_range():
    net = build_unet(UNetConfig(base_filters=8))
    with torch.no_grad():
        out = net(torch.rand(2, 3, 128, 128))
    assert out.shape == (2, 1, 128, 128)
    assert out.min() >= 0 and out.max() <= 1


def test_unet_encoder_resolutions():
    net = build_unet(UNetConfig(base_filters=8, depth=4))
    sizes = []
    for enc in net.encoders:
        enc.register_forward_hook(lambda m, i, o: sizes.append(o.shape[-1]))
    net.bottleneck.register_forward_hook(lambda m, i, o: sizes.append(o.shape[-1]))
    with torch.no_grad():
        net(torch.zeros(1, 3, 128, 128))
    assert sizes == [128, 64, 32, 16, 8]


def test_unet_filter_halving():
    net = build_unet(UNetConfig(base_filters=16))
    block0 = net.encoders[0]
    assert (block0[0].out_channels, block0[2].out_channels) == (16, 8)
    assert (net.bottleneck[0].out_channels, net.bottleneck[2].out_channels) == (256, 128)
    assert net.head.out_channels == 1


def test_unet_rejects_non_divisible_input():
    with pytest.raises(ValueError):
        build_unet(UNetConfig(input_shape=(100, 100, 3), depth=4))


def test_unet_rejects_odd_filters():
    with pytest.raises(ValueError):
        build_unet(UNetConfig(base_filters=15))


# ----------------------------------------------------------------- training

@pytest.fixture(scope="module")
def small_data():
    x, m, _ = synthetic_arrays(6, seed=11)
    return x, m


@pytest.fixture(scope="module")
def tiny_ckpt(small_data):
    x, m = small_data
    return train_segmentation(x[:4], m[:4], x[4:], m[4:], UNetConfig(base_filters=4, epochs=3, batch_size=2))


def test_training_records_history(tiny_ckpt):
    assert len(tiny_ckpt.history) == 3
    assert {"train_bce", "val_bce", "train_dice", "val_dice"} <= set(tiny_ckpt.history[0])
    best = max(tiny_ckpt.history, key=lambda r: r["val_dice"])
    assert tiny_ckpt.epoch == best["epoch"]
    assert tiny_ckpt.val_dice == best["val_dice"]


def test_training_select_by_bce(small_data):
    x, m = small_data
    ck = train_segmentation(x[:4], m[:4], x[4:], m[4:], UNetConfig(base_filters=4, epochs=3, batch_size=2, select_by="bce"))
    best = min(ck.history, key=lambda r: r["val_bce"])
    assert ck.epoch == best["epoch"]


def test_training_bce_decreases(small_data):
    x, m = small_data
    ck = train_segmentation(x, m, None, None, UNetConfig(base_filters=8, epochs=21, batch_size=2))
    assert ck.history[20]["train_bce"] < ck.history[0]["train_bce"]


def test_training_rejects_empty_set():
    with pytest.raises(TrainingError):
        train_segmentation(np.zeros((0, 128, 128, 3)), np.zeros((0, 128, 128, 1)), None, None, TINY)


def test_training_aborts_on_non_finite_loss(small_data):
    x, m = small_data
    bad = x.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train_segmentation(bad, m, None, None, TINY)


def test_predict_mask_contract(tiny_ckpt, small_data):
    x, _ = small_data
    p1 = predict_mask(tiny_ckpt, x[0])
    p2 = predict_mask(tiny_ckpt, x[0])
    assert p1.shape == (128, 128, 1)
    assert p1.min() >= 0 and p1.max() <= 1
    assert np.array_equal(p1, p2)
    with pytest.raises(ValueError):
        predict_mask(tiny_ckpt, np.zeros((64, 64, 3)))


def test_checkpoint_round_trip_is_bit_identical(tiny_ckpt, small_data, tmp_path):
    x, _ = small_data
    before = predict_mask(tiny_ckpt, x)
    tiny_ckpt.save(tmp_path / "seg.ckpt")
    loaded = SegmentationCheckpoint.load(tmp_path / "seg.ckpt")
    assert loaded.config == tiny_ckpt.config
    assert loaded.epoch == tiny_ckpt.epoch
    assert np.array_equal(predict_mask(loaded, x), before)
