"""Training orchestration: pair sampling, teacher-forcing, the two-stage
alternating-freeze schedule, Adam updates, and the per-epoch loop that wires
flow module, warp, losses and segmenter together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffarray as da
from .diffarray import Tape
from .flownet import FlowNet, FlowNetConfig
from .losses import (
    LossConfig,
    mask_flow_loss,
    segmentation_loss,
    unmasked_visual_flow_loss,
    visual_flow_loss,
)
from .segmenter import SegNet, SegNetConfig
from .warp import bilinear_warp


class TrainingError(RuntimeError):
    """Non-finite loss or gradients; names the offending epoch/batch."""


@dataclass
class TrainingConfig:
    p_teacher: float = 0.5
    e_s: int = 5
    e_a: int = 5
    epochs_total: int = 60
    learning_rate: float = 5e-4
    w_mfl: float = 1.0
    w_vfl: float = 1.0
    w_seg: float = 1.0
    lambda_iou: float = 1.0
    seed: int = 0
    batch_size: int = 8
    steps_per_epoch: int = 25
    vfl_foreground_masking: bool = True

    def __post_init__(self):
        if not (0.0 <= self.p_teacher <= 1.0):
            raise ValueError(f"p_teacher must lie in [0,1], got {self.p_teacher}")
        if self.e_s < 0:
            raise ValueError(f"e_s must be >= 0, got {self.e_s}")
        if self.e_a < 1:
            raise ValueError(f"e_a must be >= 1, got {self.e_a}")


@dataclass
class StagePlan:
    seg_trainable: bool
    flow_trainable: bool


def stage_schedule(cfg: TrainingConfig, epoch: int) -> StagePlan:
    """Warm up the segmenter, then keep flow training while the segmenter
    alternates in e_a-sized blocks, starting frozen."""
    if epoch < cfg.e_s:
        return StagePlan(seg_trainable=True, flow_trainable=False)
    block = (epoch - cfg.e_s) // cfg.e_a
    return StagePlan(seg_trainable=block % 2 == 1, flow_trainable=True)


def teacher_force_select(gt_mask, pred_mask, p, rng):
    """Pick the ground-truth mask with probability ``p``, else the prediction.

    One RNG draw per call. ``pred_mask`` may be a zero-argument callable,
    evaluated only when selected (the prediction can be costly to produce).
    """
    use_gt = rng.random() < p
    if use_gt:
        return gt_mask
    return pred_mask() if callable(pred_mask) else pred_mask


@dataclass
class SamplePair:
    sequence: object
    t: int  # target frame index, >= 1
    object_id: int

    @property
    def prev_frame(self):
        return self.sequence.frames[self.t - 1]

    @property
    def target_frame(self):
        return self.sequence.frames[self.t]

    @property
    def prev_mask(self):
        return self.sequence.masks[self.object_id][self.t - 1]

    @property
    def target_mask(self):
        return self.sequence.masks[self.object_id][self.t]


def sample_pairs(dataset, rng, batch_size):
    """Uniformly sample (sequence, consecutive frame pair, object) triples."""
    if not dataset:
        raise ValueError("sample_pairs: empty dataset")
    pool = [(seq, t, oid)
            for seq in dataset
            for oid in seq.object_ids
            for t in range(1, seq.num_frames)]
    if not pool:
        raise ValueError("sample_pairs: no consecutive frame pairs (all sequences shorter than 2?)")
    idx = rng.integers(len(pool), size=batch_size)
    return [SamplePair(*pool[i]) for i in idx]


def optimizer_step(params, moments, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; ``t`` is the 1-based step count."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m, v = moments.setdefault(name, [np.zeros_like(p.data), np.zeros_like(p.data)])
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainerState:
    flow_net: FlowNet
    seg_net: SegNet
    flow_params: dict
    seg_params: dict
    rng: np.random.Generator
    epoch: int = 0
    flow_moments: dict = field(default_factory=dict)
    seg_moments: dict = field(default_factory=dict)
    flow_steps: int = 0
    seg_steps: int = 0


def init_state(train_cfg: TrainingConfig, flow_cfg: FlowNetConfig | None = None,
               seg_cfg: SegNetConfig | None = None) -> TrainerState:
    flow_net = FlowNet(flow_cfg)
    seg_net = SegNet(seg_cfg)
    return TrainerState(
        flow_net=flow_net,
        seg_net=seg_net,
        flow_params=flow_net.init_params(seed=train_cfg.seed),
        seg_params=seg_net.init_params(seed=train_cfg.seed + 1),
        rng=np.random.default_rng(train_cfg.seed),
    )


def _predicted_prev_mask(state: TrainerState, pair: SamplePair):
    """No-grad single-step prediction of the previous frame's mask.

    Bootstraps from the ground truth two frames back; for the first pair of
    a sequence there is no earlier frame, so the ground truth stands in.
    """
    if pair.t < 2:
        return pair.prev_mask
    seq = pair.sequence
    frame_a, frame_b = seq.frames[pair.t - 2], seq.frames[pair.t - 1]
    mask_a = seq.masks[pair.object_id][pair.t - 2]
    with da.no_grad():
        flow = state.flow_net.forward(state.flow_params, frame_a, frame_b, mask_a)
        warped = bilinear_warp(mask_a, flow)
        pred = state.seg_net.forward(state.seg_params, frame_b, mask_a, warped)
    return pred.data


def _pair_loss(state, cfg, loss_cfg, pair, prev_mask_in):
    """Weighted MFL + VFL + segmentation loss for one sampled pair."""
    prev_mask_in = da.as_diff(prev_mask_in)
    flow = state.flow_net.forward(state.flow_params, pair.prev_frame, pair.target_frame, prev_mask_in)
    warped_mask = bilinear_warp(prev_mask_in, flow)
    terms = {}
    total = None
    if cfg.w_mfl:
        terms["mfl"] = mask_flow_loss(warped_mask, pair.target_mask, loss_cfg)
        total = cfg.w_mfl * terms["mfl"]
    if cfg.w_vfl:
        warped_frame = bilinear_warp(pair.prev_frame, flow)
        if cfg.vfl_foreground_masking:
            terms["vfl"] = visual_flow_loss(warped_frame, warped_mask,
                                            pair.target_frame, pair.target_mask)
        else:
            terms["vfl"] = unmasked_visual_flow_loss(warped_frame, pair.target_frame)
        piece = cfg.w_vfl * terms["vfl"]
        total = piece if total is None else total + piece
    if cfg.w_seg:
        # the warped mask enters the segmenter as an input, not a gradient
        # path: letting the segmentation loss steer the flow module
        # destabilizes the weakly-supervised flow training
        pred = state.seg_net.forward(state.seg_params, pair.target_frame,
                                     prev_mask_in, warped_mask.detach())
        terms["seg"] = segmentation_loss(pred, pair.target_mask, loss_cfg)
        piece = cfg.w_seg * terms["seg"]
        total = piece if total is None else total + piece
    if total is None:
        raise ValueError("all loss weights are zero")
    return total, terms


def train_epoch(state: TrainerState, cfg: TrainingConfig, dataset):
    """One epoch of sampled batches; updates only the stage-enabled params."""
    plan = stage_schedule(cfg, state.epoch)
    for p in state.flow_params.values():
        p.requires_grad = plan.flow_trainable
    for p in state.seg_params.values():
        p.requires_grad = plan.seg_trainable

    loss_cfg = LossConfig(lambda_iou=cfg.lambda_iou)
    sums = {"total": 0.0, "mfl": 0.0, "vfl": 0.0, "seg": 0.0}
    counts = {k: 0 for k in sums}
    for step in range(cfg.steps_per_epoch):
        batch = sample_pairs(dataset, state.rng, cfg.batch_size)
        with Tape() as tape:
            batch_total = None
            for pair in batch:
                prev_mask_in = teacher_force_select(
                    pair.prev_mask, lambda: _predicted_prev_mask(state, pair),
                    cfg.p_teacher, state.rng)
                total, terms = _pair_loss(state, cfg, loss_cfg, pair, prev_mask_in)
                batch_total = total if batch_total is None else batch_total + total
                for k, v in terms.items():
                    sums[k] += float(v.data)
                    counts[k] += 1
                sums["total"] += float(total.data)
                counts["total"] += 1
            batch_total = batch_total * (1.0 / len(batch))
            if not np.isfinite(batch_total.data):
                raise TrainingError(
                    f"non-finite loss in epoch {state.epoch}, batch {step}")
            tape.backward(batch_total)
        if plan.flow_trainable:
            state.flow_steps += 1
            optimizer_step(state.flow_params, state.flow_moments,
                           cfg.learning_rate, state.flow_steps)
        if plan.seg_trainable:
            state.seg_steps += 1
            optimizer_step(state.seg_params, state.seg_moments,
                           cfg.learning_rate, state.seg_steps)
    state.epoch += 1
    return {k: (sums[k] / counts[k] if counts[k] else 0.0) for k in sums}


def train(dataset, cfg: TrainingConfig, flow_cfg: FlowNetConfig | None = None,
          seg_cfg: SegNetConfig | None = None, on_epoch=None) -> TrainerState:
    """Run the full schedule; ``on_epoch(epoch, metrics)`` observes progress."""
    state = init_state(cfg, flow_cfg, seg_cfg)
    for epoch in range(cfg.epochs_total):
        metrics = train_epoch(state, cfg, dataset)
        if on_epoch is not None:
            on_epoch(epoch, metrics)
    return state
