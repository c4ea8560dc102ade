"""Toy propagation segmenter.

A small encoder-decoder that predicts the target-frame object mask from the
target frame and the previous mask, with the warped previous mask
concatenated onto the features entering the last decoder conv block. Each
object is segmented independently; ``merge_objects`` combines the per-object
probability maps into a single label map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffarray as da
from .diffarray import DiffArray, ShapeError
from .flownet import (
    LEAKY_SLOPE,
    _conv,
    _conv_block,
    _conv_param_shapes,
    _down_conv,
    _init_conv,
)


@dataclass
class SegNetConfig:
    levels: int = 2
    base_channels: int = 16
    input_channels: int = 4
    use_warped_mask: bool = True  # False = ablation: last block runs without the concat

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")


class SegNet:
    """Encoder-decoder mask predictor with a warped-mask injection point."""

    def __init__(self, cfg: SegNetConfig | None = None):
        self.cfg = cfg or SegNetConfig()

    def param_shapes(self):
        cfg = self.cfg
        enc = [cfg.base_channels * (2 ** l) for l in range(cfg.levels)]
        shapes = {}
        c_prev = cfg.input_channels
        for l, c in enumerate(enc):
            shapes.update(_conv_param_shapes(f"enc{l}.conv0", c_prev, c, 3))
            shapes.update(_conv_param_shapes(f"enc{l}.conv1", c, c, 3))
            c_prev = c
        skips = [cfg.input_channels] + enc[:-1]
        c_prev = enc[-1]
        for l in range(cfg.levels):
            skip_c = skips[cfg.levels - 1 - l]
            c_in = c_prev + skip_c
            if l == cfg.levels - 1 and cfg.use_warped_mask:
                c_in += 1  # the warped previous mask joins the last block
            c_out = enc[cfg.levels - 2 - l] if cfg.levels - 2 - l >= 0 else cfg.base_channels
            shapes.update(_conv_param_shapes(f"dec{l}.conv0", c_in, c_out, 3))
            shapes.update(_conv_param_shapes(f"dec{l}.conv1", c_out, c_out, 3))
            c_prev = c_out
        shapes.update(_conv_param_shapes("head", c_prev, 1, 1))
        return shapes

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        return _init_conv(self.param_shapes(), rng)

    def param_count(self, params=None):
        shapes = self.param_shapes() if params is None else {k: v.shape for k, v in params.items()}
        return int(sum(np.prod(s) for s in shapes.values()))

    def forward(self, params, target_frame, prev_mask, warped_prev_mask=None):
        """Predict a [H,W] probability mask in (0,1)."""
        cfg = self.cfg
        target_frame = da.as_diff(target_frame)
        prev_mask = da.as_diff(prev_mask)
        if target_frame.data.ndim != 3 or target_frame.shape[0] != 3:
            raise ShapeError(f"seg_forward: expected [3,H,W] target frame, got {tuple(target_frame.shape)}")
        _, h, w = target_frame.shape
        if prev_mask.shape != (h, w):
            raise ShapeError(f"seg_forward: previous mask {tuple(prev_mask.shape)} != ({h}, {w})")
        if cfg.use_warped_mask:
            if warped_prev_mask is None:
                raise ShapeError("seg_forward: warped_prev_mask required unless use_warped_mask=False")
            warped_prev_mask = da.as_diff(warped_prev_mask)
            if warped_prev_mask.shape != (h, w):
                raise ShapeError(f"seg_forward: warped mask {tuple(warped_prev_mask.shape)} != ({h}, {w})")
        elif warped_prev_mask is not None:
            raise ShapeError("seg_forward: warped_prev_mask passed in ablation mode")
        div = 2 ** cfg.levels
        if h % div or w % div:
            raise ShapeError(f"seg_forward: spatial dims {h}x{w} not divisible by 2^{cfg.levels}")

        x = da.concat_channels(target_frame, da.reshape(prev_mask, (1, h, w)))
        skips = [x]
        for l in range(cfg.levels):
            x = da.leaky_relu(_down_conv(params, f"enc{l}.conv0", x), LEAKY_SLOPE)
            x = da.leaky_relu(_conv(params, f"enc{l}.conv1", x), LEAKY_SLOPE)
            skips.append(x)
        for l in range(cfg.levels):
            x = da.bilinear_upsample_x2(x)
            parts = [x, skips[cfg.levels - 1 - l]]
            if l == cfg.levels - 1 and cfg.use_warped_mask:
                parts.append(da.reshape(warped_prev_mask, (1, h, w)))
            x = da.concat_channels(*parts)
            x = _conv_block(params, f"dec{l}", x)
        logits = _conv(params, "head", x, padding=0)
        return da.reshape(da.sigmoid(logits), (h, w))


def merge_objects(object_probs):
    """Combine K per-object probability maps into an {0..K} label map.

    A pixel takes the argmax object label when the winning probability
    exceeds 0.5, otherwise background 0; ties go to the lowest object index.
    """
    if not object_probs:
        raise ValueError("merge_objects: empty probability list")
    probs = [p.data if isinstance(p, DiffArray) else np.asarray(p) for p in object_probs]
    shape = probs[0].shape
    for p in probs:
        if p.shape != shape:
            raise ShapeError(f"merge_objects: mask shape {p.shape} != {shape}")
    stack = np.stack(probs)  # [K, H, W]
    best = np.argmax(stack, axis=0)  # argmax takes the first maximum
    best_prob = np.take_along_axis(stack, best[None], axis=0)[0]
    labels = np.where(best_prob > 0.5, best + 1, 0)
    return labels.astype(np.int32)
