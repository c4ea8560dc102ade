"""Weakly-supervised flow losses and the segmentation objective.

All losses are differentiable scalars built from the diffarray primitives:
soft IoU, binary cross-entropy, the mask flow loss (cross-entropy minus a
weighted soft IoU of the warped previous mask against the target mask), the
foreground-masked MSE visual flow loss, and the segmentation loss which
shares the mask-flow functional form.
"""

from __future__ import annotations

from dataclasses import dataclass

from .diffarray import (
    ShapeError,
    as_diff,
    log_clamped,
    maximum,
    minimum,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    square,
    sub,
)


@dataclass
class LossConfig:
    lambda_iou: float = 1.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.lambda_iou < 0:
            raise ValueError(f"lambda_iou must be nonnegative, got {self.lambda_iou}")
        if not (0.0 < self.epsilon <= 1e-3):
            raise ValueError(f"epsilon must lie in (0, 1e-3], got {self.epsilon}")


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def soft_iou(a, b):
    """Sum(min) / sum(max) of two [0,1] masks; 1.0 when both are all-zero."""
    a, b = as_diff(a), as_diff(b)
    _check_same_shape(a, b, "soft_iou")
    s_max = reduce_sum(maximum(a, b))
    if float(s_max.data) == 0.0:
        return as_diff(1.0)
    return reduce_sum(minimum(a, b)) / s_max


def binary_cross_entropy(pred, target, epsilon=1e-7):
    """Mean negative log-likelihood; logs are clamped at ``epsilon``."""
    pred, target = as_diff(pred), as_diff(target)
    _check_same_shape(pred, target, "binary_cross_entropy")
    pos = mul(target, log_clamped(pred, epsilon))
    neg = mul(1.0 - target, log_clamped(1.0 - pred, epsilon))
    return -reduce_mean(pos + neg)


def mask_flow_loss(warped_prev_mask, target_mask, cfg: LossConfig | None = None):
    """Cross-entropy minus lambda-weighted soft IoU of warped vs target mask."""
    cfg = cfg or LossConfig()
    ce = binary_cross_entropy(warped_prev_mask, target_mask, cfg.epsilon)
    if cfg.lambda_iou == 0.0:
        return ce
    return sub(ce, cfg.lambda_iou * soft_iou(warped_prev_mask, target_mask))


def visual_flow_loss(warped_prev_frame, warped_prev_mask, target_frame, target_mask):
    """Mean squared difference of the two foreground-masked frames.

    Each frame is multiplied channel-wise by its mask, so pixels outside
    both masks contribute nothing; the average runs over every
    pixel-channel slot (H*W*C).
    """
    wf, tf = as_diff(warped_prev_frame), as_diff(target_frame)
    wm, tm = as_diff(warped_prev_mask), as_diff(target_mask)
    _check_same_shape(wf, tf, "visual_flow_loss")
    _check_same_shape(wm, tm, "visual_flow_loss")
    if wf.data.ndim != 3 or wm.shape != wf.shape[1:]:
        raise ShapeError(f"visual_flow_loss: frame {tuple(wf.shape)} vs mask {tuple(wm.shape)}")
    wm3 = reshape(wm, (1,) + tuple(wm.shape))
    tm3 = reshape(tm, (1,) + tuple(tm.shape))
    return reduce_mean(square(mul(wf, wm3) - mul(tf, tm3)))


def unmasked_visual_flow_loss(warped_prev_frame, target_frame):
    """Plain MSE between warped and target frames (foreground-masking ablation)."""
    wf, tf = as_diff(warped_prev_frame), as_diff(target_frame)
    _check_same_shape(wf, tf, "unmasked_visual_flow_loss")
    return reduce_mean(square(wf - tf))


def segmentation_loss(pred_mask, target_mask, cfg: LossConfig | None = None):
    """Final-prediction objective; same functional form as mask_flow_loss."""
    return mask_flow_loss(pred_mask, target_mask, cfg)
