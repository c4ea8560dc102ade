"""Lightweight hourglass flow module.

Consumes the previous frame, target frame and previous mask (7 channels
total), runs a symmetric strided-conv encoder / bilinear-upsampling decoder
with skip connections, and regresses a tanh-bounded normalized flow field.
The output head is zero-initialized so a fresh module predicts zero flow
and warping starts as the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffarray as da
from .diffarray import DiffArray, ShapeError


@dataclass
class FlowNetConfig:
    levels: int = 3
    base_channels: int = 16
    input_channels: int = 7
    max_flow: float = 0.25  # tanh output scale, in normalized flow units

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if not (0.0 < self.max_flow <= 1.0):
            raise ValueError(f"max_flow must lie in (0, 1], got {self.max_flow}")


LEAKY_SLOPE = 0.1


def _conv_param_shapes(name, c_in, c_out, k):
    return {f"{name}.w": (c_out, c_in, k, k), f"{name}.b": (c_out,)}


def _init_conv(shapes, rng, zero=False):
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".w"):
            if zero:
                data = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                limit = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = DiffArray(data, requires_grad=True)
    return params


def _conv(params, name, x, stride=1, padding=1):
    return da.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=padding)


def _down_conv(params, name, x):
    """Stride-2 3x3 conv halving even spatial dims.

    A symmetric pad would give a non-integral output size, so the input is
    padded one pixel on the top/left only.
    """
    return da.conv2d(da.pad2d(x, 1, 0, 1, 0), params[f"{name}.w"], params[f"{name}.b"],
                     stride=2, padding=0)


def _conv_block(params, name, x):
    """Two 3x3 convs with leaky-relu activations."""
    x = da.leaky_relu(_conv(params, f"{name}.conv0", x), LEAKY_SLOPE)
    return da.leaky_relu(_conv(params, f"{name}.conv1", x), LEAKY_SLOPE)


class FlowNet:
    """Hourglass flow regressor; parameters live in a flat name->DiffArray dict."""

    def __init__(self, cfg: FlowNetConfig | None = None):
        self.cfg = cfg or FlowNetConfig()

    def _channel_plan(self):
        cfg = self.cfg
        enc = [cfg.base_channels * (2 ** l) for l in range(cfg.levels)]
        return enc

    def param_shapes(self):
        cfg = self.cfg
        enc = self._channel_plan()
        shapes = {}
        c_prev = cfg.input_channels
        for l, c in enumerate(enc):
            shapes.update(_conv_param_shapes(f"enc{l}.conv0", c_prev, c, 3))
            shapes.update(_conv_param_shapes(f"enc{l}.conv1", c, c, 3))
            c_prev = c
        # decoder level l upsamples from enc level (levels-1-l+1) scale and
        # concatenates the symmetric encoder feature (the raw input for the
        # final level)
        skips = [cfg.input_channels] + enc[:-1]
        c_prev = enc[-1]
        for l in range(cfg.levels):
            skip_c = skips[cfg.levels - 1 - l]
            c_out = enc[cfg.levels - 2 - l] if cfg.levels - 2 - l >= 0 else cfg.base_channels
            shapes.update(_conv_param_shapes(f"dec{l}.conv0", c_prev + skip_c, c_out, 3))
            shapes.update(_conv_param_shapes(f"dec{l}.conv1", c_out, c_out, 3))
            c_prev = c_out
        shapes.update(_conv_param_shapes("head", c_prev, 2, 1))
        return shapes

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        shapes = self.param_shapes()
        params = {}
        for name, shape in shapes.items():
            zero = name.startswith("head.")
            params.update(_init_conv({name: shape}, rng, zero=zero))
        return params

    def param_count(self, params=None):
        shapes = self.param_shapes() if params is None else {k: v.shape for k, v in params.items()}
        return int(sum(np.prod(s) for s in shapes.values()))

    def forward(self, params, prev_frame, target_frame, prev_mask):
        """Regress a normalized [2,H,W] flow field, values in [-max_flow, max_flow]."""
        cfg = self.cfg
        prev_frame = da.as_diff(prev_frame)
        target_frame = da.as_diff(target_frame)
        prev_mask = da.as_diff(prev_mask)
        if prev_frame.data.ndim != 3 or prev_frame.shape[0] != 3:
            raise ShapeError(f"flow_forward: expected [3,H,W] previous frame, got {tuple(prev_frame.shape)}")
        _, h, w = prev_frame.shape
        if target_frame.shape != (3, h, w):
            raise ShapeError(f"flow_forward: target frame {tuple(target_frame.shape)} != (3, {h}, {w})")
        if prev_mask.shape != (h, w):
            raise ShapeError(f"flow_forward: previous mask {tuple(prev_mask.shape)} != ({h}, {w})")
        div = 2 ** cfg.levels
        if h % div or w % div:
            raise ShapeError(f"flow_forward: spatial dims {h}x{w} not divisible by 2^{cfg.levels}")

        mask3 = da.reshape(prev_mask, (1, h, w))
        x = da.concat_channels(prev_frame, target_frame, mask3)
        skips = [x]
        for l in range(cfg.levels):
            x = da.leaky_relu(_down_conv(params, f"enc{l}.conv0", x), LEAKY_SLOPE)
            x = da.leaky_relu(_conv(params, f"enc{l}.conv1", x), LEAKY_SLOPE)
            skips.append(x)
        for l in range(cfg.levels):
            x = da.bilinear_upsample_x2(x)
            x = da.concat_channels(x, skips[cfg.levels - 1 - l])
            x = _conv_block(params, f"dec{l}", x)
        # the scaled tanh keeps displacements within a recoverable range: a
        # saturated head must not be able to throw content fully out of frame
        return cfg.max_flow * da.tanh(_conv(params, "head", x, padding=0))
