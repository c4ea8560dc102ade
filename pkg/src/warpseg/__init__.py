"""Foreground-targeted visual warping for semi-supervised video object
segmentation: a differentiable warping operator, weakly-supervised flow
losses, a small hourglass flow module, a toy propagation segmenter, and the
standard VOS evaluation surface — all on a from-scratch numpy gradient
engine.
"""

from .diffarray import DiffArray, Tape, grad_check, load_checkpoint, save_checkpoint
from .flownet import FlowNet, FlowNetConfig
from .losses import (
    LossConfig,
    binary_cross_entropy,
    mask_flow_loss,
    segmentation_loss,
    soft_iou,
    visual_flow_loss,
)
from .segmenter import SegNet, SegNetConfig, merge_objects
from .training import TrainingConfig, stage_schedule, train, train_epoch
from .warp import bilinear_warp, denormalize_flow, normalize_flow, read_flo, write_flo

__all__ = [
    "DiffArray",
    "Tape",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "FlowNet",
    "FlowNetConfig",
    "SegNet",
    "SegNetConfig",
    "merge_objects",
    "LossConfig",
    "soft_iou",
    "binary_cross_entropy",
    "mask_flow_loss",
    "visual_flow_loss",
    "segmentation_loss",
    "TrainingConfig",
    "stage_schedule",
    "train",
    "train_epoch",
    "bilinear_warp",
    "normalize_flow",
    "denormalize_flow",
    "read_flo",
    "write_flo",
]
