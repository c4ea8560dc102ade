"""Differentiable backward warping and the flow-field representation.

Flow fields are stored channel-first [2, H, W]: channel 0 is the x
displacement, channel 1 the y displacement, both in normalized units.
The fixed convention here is pixel displacement = value * W for x and
value * H for y. Out-of-frame samples read as zero (background).
"""

from __future__ import annotations

import struct

import numpy as np

from .diffarray import DiffArray, ShapeError, _emit, as_diff, reshape

FLO_MAGIC = 202021.25


def bilinear_warp(source, flow):
    """Backward-warp [C,H,W] ``source`` by a normalized [2,H,W] ``flow``.

    output(y, x) samples the source bilinearly at
    (x + flow_x(y,x)*W, y + flow_y(y,x)*H); samples outside the source are
    zero. Differentiable with respect to both arguments. A rank-2 source
    (a mask) is warped as a single channel and returned rank-2.
    """
    source, flow = as_diff(source), as_diff(flow)
    if source.data.ndim == 2:
        lifted = reshape(source, (1,) + tuple(source.shape))
        return reshape(bilinear_warp(lifted, flow), tuple(source.shape))
    if source.data.ndim != 3:
        raise ShapeError(f"bilinear_warp: expected [C,H,W] source, got {tuple(source.shape)}")
    c, h, w = source.shape
    if flow.shape != (2, h, w):
        raise ShapeError(f"bilinear_warp: flow shape {tuple(flow.shape)} != (2, {h}, {w})")

    dtype = source.dtype
    yy, xx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    gx = xx + flow.data[0] * w
    gy = yy + flow.data[1] * h
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    wx = (gx - x0).astype(dtype)
    wy = (gy - y0).astype(dtype)

    src = source.data

    def sample(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = src[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid, vals, 0.0), valid

    v00, m00 = sample(y0, x0)
    v01, m01 = sample(y0, x0 + 1)
    v10, m10 = sample(y0 + 1, x0)
    v11, m11 = sample(y0 + 1, x0 + 1)
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def vjp(g):
        g_src = np.zeros_like(src)
        for (yi, xi), mask, wgt in (((y0, x0), m00, w00), ((y0, x0 + 1), m01, w01),
                                    ((y0 + 1, x0), m10, w10), ((y0 + 1, x0 + 1), m11, w11)):
            contrib = g * wgt
            yv, xv = yi[mask], xi[mask]
            for ch in range(c):
                np.add.at(g_src[ch], (yv, xv), contrib[ch][mask])
        # d/dgx and d/dgy of the bilinear kernel, summed over channels
        dgx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * g
        dgy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * g
        g_flow = np.stack([dgx.sum(axis=0) * w, dgy.sum(axis=0) * h])
        return g_src, g_flow.astype(g.dtype, copy=False)

    return _emit(out.astype(dtype, copy=False), (source, flow), vjp)


def denormalize_flow(flow):
    """Normalized [2,H,W] flow to pixel-unit displacements."""
    flow = np.asarray(flow.data if isinstance(flow, DiffArray) else flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"denormalize_flow: expected [2,H,W], got {tuple(flow.shape)}")
    _, h, w = flow.shape
    out = flow.astype(np.float64).copy()
    out[0] *= w
    out[1] *= h
    return out.astype(flow.dtype if flow.dtype.kind == "f" else np.float32)


def normalize_flow(flow_px):
    """Pixel-unit [2,H,W] displacements to normalized values."""
    flow_px = np.asarray(flow_px)
    if flow_px.ndim != 3 or flow_px.shape[0] != 2:
        raise ShapeError(f"normalize_flow: expected [2,H,W], got {tuple(flow_px.shape)}")
    _, h, w = flow_px.shape
    out = flow_px.astype(np.float64).copy()
    out[0] /= w
    out[1] /= h
    return out.astype(flow_px.dtype if flow_px.dtype.kind == "f" else np.float32)


class FloFormatError(IOError):
    """Not a valid Middlebury .flo file."""


def write_flo(path, flow):
    """Write a normalized [2,H,W] flow as a Middlebury .flo file (pixel units)."""
    px = denormalize_flow(flow)
    _, h, w = px.shape
    interleaved = np.ascontiguousarray(px.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(interleaved.tobytes())


def read_flo(path):
    """Read a Middlebury .flo file into a normalized [2,H,W] flow."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise FloFormatError(f"{path}: truncated header")
        (magic,) = struct.unpack("<f", head[:4])
        if magic != np.float32(FLO_MAGIC):
            raise FloFormatError(f"{path}: bad magic {magic!r}")
        w, h = struct.unpack("<ii", head[4:12])
        data = np.frombuffer(fh.read(8 * w * h), dtype="<f4")
    if data.size != 2 * w * h:
        raise FloFormatError(f"{path}: expected {2 * w * h} floats, got {data.size}")
    px = data.reshape(h, w, 2).transpose(2, 0, 1)
    return normalize_flow(px.astype(np.float32))
