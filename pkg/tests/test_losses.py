"""Loss closed forms, gradient checks and numpy reference comparisons."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from warpseg.diffarray import ShapeError, grad_check
from warpseg.losses import (
    LossConfig,
    binary_cross_entropy,
    mask_flow_loss,
    segmentation_loss,
    soft_iou,
    unmasked_visual_flow_loss,
    visual_flow_loss,
)

probs = arrays(np.float64, (4, 4), elements=st.floats(0.02, 0.98))
binary = arrays(np.float64, (4, 4), elements=st.sampled_from([0.0, 1.0]))


# ---------------------------------------------------------------------------
# soft IoU


def test_soft_iou_identical_masks_is_one():
    rng = np.random.default_rng(0)
    m = rng.random((5, 5))
    assert abs(float(soft_iou(m, m).data) - 1.0) <= 1e-6


def test_soft_iou_disjoint_masks_is_zero():
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[0, 0] = 1.0
    b[3, 3] = 1.0
    assert float(soft_iou(a, b).data) == 0.0


def test_soft_iou_both_empty_is_one():
    z = np.zeros((3, 3))
    assert float(soft_iou(z, z).data) == 1.0


@given(a=probs, b=probs)
@settings(max_examples=50, deadline=None)
def test_soft_iou_matches_numpy_reference(a, b):
    got = float(soft_iou(a, b).data)
    want = np.minimum(a, b).sum() / np.maximum(a, b).sum()
    assert abs(got - want) <= 1e-6


@given(a=probs, b=probs)
@settings(max_examples=30, deadline=None)
def test_soft_iou_symmetric_and_bounded(a, b):
    ab = float(soft_iou(a, b).data)
    ba = float(soft_iou(b, a).data)
    assert abs(ab - ba) <= 1e-6
    assert 0.0 <= ab <= 1.0 + 1e-6


def test_soft_iou_gradient():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.1, 0.9, (4, 4))
    b = np.clip(a + np.where(rng.random((4, 4)) < 0.5, 0.05, -0.05), 0.0, 1.0)
    assert grad_check(lambda x, y: soft_iou(x, y), [a, b]) <= 1e-6


# ---------------------------------------------------------------------------
# cross-entropy


@given(p=probs, t=binary)
@settings(max_examples=50, deadline=None)
def test_bce_matches_numpy_reference(p, t):
    got = float(binary_cross_entropy(p, t).data)
    want = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert abs(got - want) <= 1e-6


def test_bce_perfect_binary_prediction_is_zero():
    t = np.array([[0.0, 1.0], [1.0, 0.0]])
    # clamped logs make exact 0/1 predictions safe
    assert float(binary_cross_entropy(t, t).data) == 0.0


def test_bce_gradient():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.1, 0.9, (3, 3))
    t = (rng.random((3, 3)) > 0.5).astype(np.float64)
    assert grad_check(lambda x: binary_cross_entropy(x, t), [p]) <= 1e-6


# ---------------------------------------------------------------------------
# mask flow loss closed forms


def test_mfl_perfect_alignment_value_is_minus_lambda():
    mask = np.zeros((6, 6))
    mask[2:5, 1:4] = 1.0
    for lam in (0.5, 1.0, 2.0):
        got = float(mask_flow_loss(mask, mask, LossConfig(lambda_iou=lam)).data)
        assert abs(got - (-lam)) <= 1e-6


def test_mfl_affine_in_lambda():
    rng = np.random.default_rng(3)
    pred = rng.uniform(0.1, 0.9, (5, 5))
    target = (rng.random((5, 5)) > 0.5).astype(np.float64)
    iou = float(soft_iou(pred, target).data)
    l1 = float(mask_flow_loss(pred, target, LossConfig(lambda_iou=0.3)).data)
    l2 = float(mask_flow_loss(pred, target, LossConfig(lambda_iou=1.7)).data)
    assert abs((l1 - l2) - (1.7 - 0.3) * iou) <= 1e-6


def test_mfl_lambda_zero_is_plain_bce():
    rng = np.random.default_rng(4)
    pred = rng.uniform(0.1, 0.9, (4, 4))
    target = (rng.random((4, 4)) > 0.5).astype(np.float64)
    got = float(mask_flow_loss(pred, target, LossConfig(lambda_iou=0.0)).data)
    want = float(binary_cross_entropy(pred, target).data)
    assert abs(got - want) <= 1e-7


def test_mfl_gradient():
    rng = np.random.default_rng(5)
    pred = rng.uniform(0.1, 0.9, (4, 4))
    target = (rng.random((4, 4)) > 0.5).astype(np.float64)
    assert grad_check(lambda x: mask_flow_loss(x, target), [pred]) <= 1e-6


def test_segmentation_loss_shares_mfl_form():
    rng = np.random.default_rng(6)
    pred = rng.uniform(0.1, 0.9, (4, 4))
    target = (rng.random((4, 4)) > 0.5).astype(np.float64)
    cfg = LossConfig(lambda_iou=0.8)
    assert float(segmentation_loss(pred, target, cfg).data) == \
        float(mask_flow_loss(pred, target, cfg).data)


# ---------------------------------------------------------------------------
# visual flow loss closed forms


def test_vfl_zero_under_identical_masked_frames():
    rng = np.random.default_rng(7)
    frame = rng.random((3, 5, 5))
    mask = (rng.random((5, 5)) > 0.5).astype(np.float64)
    # frames differ only where both masks are zero
    other = frame + (1.0 - mask)[None] * rng.random((3, 5, 5))
    assert abs(float(visual_flow_loss(frame, mask, other, mask).data)) <= 1e-6


def test_vfl_zero_under_all_zero_masks():
    rng = np.random.default_rng(8)
    a, b = rng.random((3, 4, 4)), rng.random((3, 4, 4))
    z = np.zeros((4, 4))
    assert float(visual_flow_loss(a, z, b, z).data) == 0.0


def test_vfl_matches_numpy_reference():
    rng = np.random.default_rng(9)
    wf, tf = rng.random((3, 6, 6)), rng.random((3, 6, 6))
    wm, tm = rng.random((6, 6)), rng.random((6, 6))
    got = float(visual_flow_loss(wf, wm, tf, tm).data)
    want = np.mean((wf * wm[None] - tf * tm[None]) ** 2)
    assert abs(got - want) <= 1e-6


def test_vfl_averages_over_all_slots():
    # one differing masked pixel in one channel -> diff^2 / (C*H*W)
    wf = np.zeros((3, 4, 4))
    tf = np.zeros((3, 4, 4))
    wm = np.zeros((4, 4))
    tm = np.zeros((4, 4))
    wm[1, 1] = 1.0
    wf[0, 1, 1] = 0.5
    got = float(visual_flow_loss(wf, wm, tf, tm).data)
    assert abs(got - 0.25 / (3 * 4 * 4)) <= 1e-9


def test_unmasked_vfl_is_plain_mse():
    rng = np.random.default_rng(10)
    a, b = rng.random((3, 5, 5)), rng.random((3, 5, 5))
    got = float(unmasked_visual_flow_loss(a, b).data)
    assert abs(got - np.mean((a - b) ** 2)) <= 1e-6


def test_vfl_gradient():
    rng = np.random.default_rng(11)
    wf = rng.random((3, 4, 4))
    wm = rng.uniform(0.1, 0.9, (4, 4))
    tf = rng.random((3, 4, 4))
    tm = rng.uniform(0.1, 0.9, (4, 4))
    err = grad_check(lambda a, m: visual_flow_loss(a, m, tf, tm), [wf, wm])
    assert err <= 1e-6


# ---------------------------------------------------------------------------
# validation


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_iou=-0.1)
    with pytest.raises(ValueError):
        LossConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        LossConfig(epsilon=0.1)


def test_shape_mismatches_raise():
    with pytest.raises(ShapeError):
        soft_iou(np.zeros((3, 3)), np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        binary_cross_entropy(np.zeros((3, 3)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        visual_flow_loss(np.zeros((3, 4, 4)), np.zeros((5, 5)),
                         np.zeros((3, 4, 4)), np.zeros((5, 5)))
