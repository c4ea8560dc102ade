"""DAVIS-protocol metrics and qualitative visualization emitters.

Jaccard index, boundary F-score with a dilation-style Euclidean tolerance,
sequence-level aggregation into an EvalReport, polar flow colorization, the
warp-difference rendering, and foreground-masked frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .diffarray import ShapeError
from .warp import denormalize_flow


def _as_bool_mask(mask, op):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D mask, got shape {arr.shape}")
    return arr > 0.5


def jaccard(pred, gt):
    """Intersection over union of binarized masks; 1.0 when both are empty."""
    pred = _as_bool_mask(pred, "jaccard")
    gt = _as_bool_mask(gt, "jaccard")
    if pred.shape != gt.shape:
        raise ShapeError(f"jaccard: shapes {pred.shape} and {gt.shape} differ")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_pixels(mask):
    """Foreground pixels 4-adjacent to background or to the image edge."""
    m = _as_bool_mask(mask, "boundary_pixels")
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def default_boundary_tolerance(shape):
    """ceil(0.008 * image diagonal), the official-protocol bound."""
    return math.ceil(0.008 * math.hypot(*shape))


def boundary_f(pred, gt, tol_radius=None):
    """Boundary F-score: harmonic mean of tolerance-matched precision/recall."""
    pred = _as_bool_mask(pred, "boundary_f")
    gt = _as_bool_mask(gt, "boundary_f")
    if pred.shape != gt.shape:
        raise ShapeError(f"boundary_f: shapes {pred.shape} and {gt.shape} differ")
    if tol_radius is None:
        tol_radius = default_boundary_tolerance(pred.shape)
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_gb = distance_transform_edt(~gb)
    dist_to_pb = distance_transform_edt(~pb)
    precision = float((dist_to_gb[pb] <= tol_radius).mean())
    recall = float((dist_to_pb[gb] <= tol_radius).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    global_j: float
    global_f: float
    per_sequence: dict = field(default_factory=dict)  # name -> {"J","F","JF"}
    per_object: dict = field(default_factory=dict)  # "name/obj" -> {"J","F","JF"}
    temporal_stability: float | None = None  # non-protocol diagnostic

    @property
    def global_jf(self):
        return (self.global_j + self.global_f) / 2.0

    def to_dict(self):
        out = {
            "global": {"J": self.global_j, "F": self.global_f, "JF": self.global_jf},
            "per_sequence": self.per_sequence,
            "per_object": self.per_object,
        }
        if self.temporal_stability is not None:
            # artifact-defined diagnostic, not part of the DAVIS protocol
            out["temporal_stability"] = self.temporal_stability
        return out


def evaluate(pred_sequences, gt_sequences, first_frame_excluded=True):
    """Aggregate J / F over sequences and objects.

    ``pred_sequences`` maps name -> {object id -> list of T masks}; structure
    must match the ground truth. Frame 0 is the given reference and is
    excluded from the averages by default.
    """
    gt_by_name = {seq.name: seq for seq in gt_sequences}
    if set(pred_sequences) != set(gt_by_name):
        raise ValueError(
            f"evaluate: sequence sets differ (pred {sorted(pred_sequences)} vs gt {sorted(gt_by_name)})")
    per_sequence, per_object = {}, {}
    stab_scores = []
    start = 1 if first_frame_excluded else 0
    for name in sorted(pred_sequences):
        gt_seq = gt_by_name[name]
        preds = pred_sequences[name]
        if sorted(preds) != gt_seq.object_ids:
            raise ValueError(f"evaluate: object ids for {name} differ "
                             f"({sorted(preds)} vs {gt_seq.object_ids})")
        obj_scores = []
        for oid in gt_seq.object_ids:
            pred_masks = preds[oid]
            gt_masks = gt_seq.masks[oid]
            if len(pred_masks) != len(gt_masks):
                raise ValueError(f"evaluate: {name}/{oid} has {len(pred_masks)} predictions "
                                 f"for {len(gt_masks)} frames")
            js = [jaccard(pred_masks[t], gt_masks[t]) for t in range(start, len(gt_masks))]
            fs = [boundary_f(pred_masks[t], gt_masks[t]) for t in range(start, len(gt_masks))]
            j, f = float(np.mean(js)), float(np.mean(fs))
            per_object[f"{name}/{oid}"] = {"J": j, "F": f, "JF": (j + f) / 2.0}
            obj_scores.append((j, f))
            stab_scores.extend(jaccard(pred_masks[t], pred_masks[t - 1])
                               for t in range(1, len(pred_masks)))
        j = float(np.mean([s[0] for s in obj_scores]))
        f = float(np.mean([s[1] for s in obj_scores]))
        per_sequence[name] = {"J": j, "F": f, "JF": (j + f) / 2.0}
    global_j = float(np.mean([v["J"] for v in per_object.values()]))
    global_f = float(np.mean([v["F"] for v in per_object.values()]))
    return EvalReport(global_j, global_f, per_sequence, per_object,
                      temporal_stability=float(np.mean(stab_scores)) if stab_scores else None)


# ---------------------------------------------------------------------------
# visualization


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, hue in [0, 1)."""
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    channels = [np.choose(i, [v, q, p, p, t, v]),
                np.choose(i, [t, v, v, q, p, p]),
                np.choose(i, [p, p, t, v, v, q])]
    return np.stack(channels)


def flow_colorize(flow):
    """Polar color coding of a normalized [2,H,W] flow field.

    Hue encodes direction, saturation encodes magnitude relative to the
    field maximum, value is 1; zero flow renders white.
    """
    px = denormalize_flow(flow).astype(np.float64)
    mag = np.hypot(px[0], px[1])
    max_mag = mag.max()
    sat = mag / max_mag if max_mag > 0 else np.zeros_like(mag)
    hue = (np.arctan2(px[1], px[0]) / (2.0 * np.pi)) % 1.0
    return _hsv_to_rgb(hue, sat, np.ones_like(sat)).astype(np.float32)


def warp_diff(prev_mask, warped_mask):
    """Highlight pixels present in the previous but not the warped mask."""
    prev = _as_bool_mask(prev_mask, "warp_diff")
    warped = _as_bool_mask(warped_mask, "warp_diff")
    if prev.shape != warped.shape:
        raise ShapeError(f"warp_diff: shapes {prev.shape} and {warped.shape} differ")
    base = prev.astype(np.float32) * 0.3
    base[prev & ~warped] = 1.0
    return np.broadcast_to(base[None], (3,) + base.shape).copy()


def masked_warped_frame(warped_frame, warped_mask):
    """Channelwise product of a frame with its mask."""
    frame = np.asarray(warped_frame, dtype=np.float32)
    mask = np.asarray(warped_mask, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[1:] != mask.shape:
        raise ShapeError(f"masked_warped_frame: frame {frame.shape} vs mask {mask.shape}")
    return frame * mask[None]
