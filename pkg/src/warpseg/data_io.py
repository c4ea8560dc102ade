"""Synthetic moving-shape videos and DAVIS-layout dataset IO.

Synthetic sequences render 1-2 rigid shapes (disk, rectangle, triangle)
drifting over a flat or textured background. Motion is rigid per object, so
the exact inter-frame displacement field is known and recorded, giving the
tests an analytic flow oracle that real datasets cannot provide.

On-disk layout follows the DAVIS convention:
JPEGImages/<seq>/NNNNN.png and Annotations/<seq>/NNNNN.png with
palette-indexed masks (index k > 0 = object k), plus a sidecar motion.txt
for synthetic ground-truth displacements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .warp import normalize_flow


@dataclass
class Pose:
    cx: float
    cy: float
    theta: float
    scale: float


@dataclass
class VideoSequence:
    name: str
    frames: list  # T arrays of shape [3, H, W], float32 in [0, 1]
    masks: dict  # object id -> list of T arrays [H, W], float32 binary
    poses: dict | None = None  # object id -> list of T Pose (synthetic only)

    @property
    def num_frames(self):
        return len(self.frames)

    @property
    def object_ids(self):
        return sorted(self.masks)


@dataclass
class SyntheticSpec:
    height: int = 64
    width: int = 64
    num_sequences: int = 10
    frames_per_sequence: int = 8
    min_shapes: int = 1
    max_shapes: int = 2
    translation_px: tuple = (4.0, 12.0)
    rotation_deg: float = 10.0
    scale_range: tuple = (0.95, 1.05)
    textured_background: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.translation_px[1] >= min(self.height, self.width) / 3:
            raise ValueError(
                f"max translation {self.translation_px[1]} px must stay below "
                f"min(H, W)/3 = {min(self.height, self.width) / 3:.1f}")
        if self.frames_per_sequence < 2:
            raise ValueError("frames_per_sequence must be >= 2")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise ValueError("need 1 <= min_shapes <= max_shapes")


_SHAPE_KINDS = ("disk", "rectangle", "triangle")


def _shape_support(kind, size, px, py):
    """Inclusion test of canonical points (px, py) for each shape kind."""
    if kind == "disk":
        return px * px + py * py <= size * size
    if kind == "rectangle":
        return (np.abs(px) <= size) & (np.abs(py) <= 0.7 * size)
    # equilateral triangle of circumradius size, apex up
    v = [(size * math.cos(a), size * math.sin(a))
         for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
    inside = np.ones_like(px, dtype=bool)
    for i in range(3):
        x0, y0 = v[i]
        x1, y1 = v[(i + 1) % 3]
        inside &= (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0
    return inside


def _render_object(kind, size, color, pose, h, w):
    """Binary support mask and shaded color patch for one rigid shape."""
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - pose.cx
    dy = yy - pose.cy
    cos_t, sin_t = math.cos(-pose.theta), math.sin(-pose.theta)
    px = (cos_t * dx - sin_t * dy) / pose.scale
    py = (sin_t * dx + cos_t * dy) / pose.scale
    support = _shape_support(kind, size, px, py)
    # shading rides canonical coordinates so the object texture moves
    # rigidly with it; the oscillation gives the visual loss dense interior
    # gradients instead of an edge-only signal
    ramp = np.clip((px + py) / (2.0 * size) + 0.5, 0.0, 1.0)
    waves = np.sin(px * (2.0 * np.pi / 7.0)) * np.sin(py * (2.0 * np.pi / 7.0))
    shade = 0.55 + 0.25 * ramp + 0.2 * (waves * 0.5 + 0.5)
    patch = color[:, None, None] * shade[None]
    return support.astype(np.float32), patch.astype(np.float32)


def rigid_flow_field(h, w, pose_prev: Pose, pose_cur: Pose):
    """Normalized backward flow mapping frame-t coords onto frame t-1.

    For each target pixel u, the source point is
    T_prev(T_cur^{-1}(u)); the flow is (source - u) in pixels, normalized.
    """
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - pose_cur.cx
    dy = yy - pose_cur.cy
    cos_c, sin_c = math.cos(-pose_cur.theta), math.sin(-pose_cur.theta)
    px = (cos_c * dx - sin_c * dy) / pose_cur.scale
    py = (sin_c * dx + cos_c * dy) / pose_cur.scale
    cos_p, sin_p = math.cos(pose_prev.theta), math.sin(pose_prev.theta)
    sx = pose_prev.cx + pose_prev.scale * (cos_p * px - sin_p * py)
    sy = pose_prev.cy + pose_prev.scale * (sin_p * px + cos_p * py)
    flow_px = np.stack([sx - xx, sy - yy]).astype(np.float32)
    return normalize_flow(flow_px)


def _background(rng, h, w, textured):
    color = rng.uniform(0.1, 0.5, size=3)
    bg = np.broadcast_to(color[:, None, None], (3, h, w)).astype(np.float32).copy()
    if textured:
        noise = gaussian_filter(rng.standard_normal((h, w)), sigma=2.0)
        span = noise.max() - noise.min()
        if span > 0:
            noise = (noise - noise.min()) / span
        bg *= (0.7 + 0.6 * noise[None]).astype(np.float32)
    return np.clip(bg, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec):
    """Render ``spec.num_sequences`` rigid-motion sequences, deterministically."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    sequences = []
    for s in range(spec.num_sequences):
        bg = _background(rng, h, w, spec.textured_background)
        n_obj = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        kinds, sizes, colors, poses, vels, margins = [], [], [], [], [], []
        for k in range(n_obj):
            kinds.append(_SHAPE_KINDS[rng.integers(len(_SHAPE_KINDS))])
            sizes.append(float(rng.uniform(0.14, 0.22) * min(h, w)))
            colors.append(rng.uniform(0.5, 1.0, size=3))
            # shapes never overhang the frame: warped content entering from
            # outside would be unrecoverable under zero-padded sampling
            margins.append(sizes[k] * 1.45 + 1.0)
            cx = float(rng.uniform(margins[k], w - margins[k]))
            cy = float(rng.uniform(margins[k], h - margins[k]))
            poses.append([Pose(cx, cy, float(rng.uniform(0, 2 * math.pi)), 1.0)])
            vels.append(float(rng.uniform(0, 2 * math.pi)))  # heading angle

        for t in range(1, spec.frames_per_sequence):
            for k in range(n_obj):
                prev = poses[k][-1]
                mag = float(rng.uniform(*spec.translation_px))
                heading = vels[k]
                dx = mag * math.cos(heading)
                dy = mag * math.sin(heading)
                # bounce off the border band so objects stay fully in frame
                if not (margins[k] <= prev.cx + dx <= w - margins[k]):
                    heading = math.pi - heading
                if not (margins[k] <= prev.cy + dy <= h - margins[k]):
                    heading = -heading
                vels[k] = heading
                dx = mag * math.cos(heading)
                dy = mag * math.sin(heading)
                dtheta = math.radians(float(rng.uniform(-spec.rotation_deg, spec.rotation_deg)))
                dscale = float(rng.uniform(*spec.scale_range))
                new_scale = min(max(prev.scale * dscale, 0.7), 1.4)
                poses[k].append(Pose(prev.cx + dx, prev.cy + dy, prev.theta + dtheta, new_scale))

        frames, masks = [], {k + 1: [] for k in range(n_obj)}
        for t in range(spec.frames_per_sequence):
            frame = bg.copy()
            for k in range(n_obj):
                support, patch = _render_object(kinds[k], sizes[k], colors[k], poses[k][t], h, w)
                frame = np.where(support[None] > 0, patch, frame)
                masks[k + 1].append(support)
            frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
        sequences.append(VideoSequence(
            name=f"synth{s:04d}", frames=frames, masks=masks,
            poses={k + 1: poses[k] for k in range(n_obj)}))
    return sequences


# ---------------------------------------------------------------------------
# DAVIS-layout IO


class DatasetError(IOError):
    """Missing, malformed or inconsistent dataset files."""


def davis_palette():
    """Standard 256-entry VOC/DAVIS palette, flattened for PIL."""
    palette = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        cid, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((cid >> 0) & 1) << (7 - j)
            g |= ((cid >> 1) & 1) << (7 - j)
            b |= ((cid >> 2) & 1) << (7 - j)
            cid >>= 3
        palette[i] = (r, g, b)
    return palette.reshape(-1).tolist()


def _load_image(path):
    try:
        with Image.open(path) as img:
            img.load()
            return img.convert("RGB") if img.mode not in ("P", "L") else img
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def read_davis_layout(root_path):
    """Load sequences from JPEGImages/ + Annotations/ under ``root_path``.

    Object ids come from the frame-0 annotation. Sequences annotated only on
    frame 0 are loaded in inference mode (single-entry mask lists).
    """
    root = Path(root_path)
    img_root = root / "JPEGImages"
    ann_root = root / "Annotations"
    if not img_root.is_dir() or not ann_root.is_dir():
        raise DatasetError(f"{root}: expected JPEGImages/ and Annotations/ subdirectories")
    sequences = []
    for seq_dir in sorted(p for p in img_root.iterdir() if p.is_dir()):
        frame_paths = sorted(p for p in seq_dir.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
        if not frame_paths:
            continue
        frames = []
        for p in frame_paths:
            img = _load_image(p).convert("RGB")
            frames.append((np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1))
        h, w = frames[0].shape[1:]
        ann_dir = ann_root / seq_dir.name
        ann_paths = sorted(ann_dir.glob("*.png")) if ann_dir.is_dir() else []
        if not ann_paths or ann_paths[0].stem != frame_paths[0].stem:
            raise DatasetError(f"{seq_dir.name}: missing annotation for frame 0")
        labels = []
        for p in ann_paths:
            arr = np.asarray(_load_image(p))
            if arr.ndim == 3:
                raise DatasetError(f"{p}: annotation must be palette- or gray-indexed")
            if arr.shape != (h, w):
                raise DatasetError(f"{p}: mask size {arr.shape} != frame size {(h, w)}")
            labels.append(arr)
        object_ids = sorted(int(i) for i in np.unique(labels[0]) if i > 0)
        if len(labels) not in (1, len(frames)):
            raise DatasetError(
                f"{seq_dir.name}: {len(labels)} annotations for {len(frames)} frames "
                "(need all frames, or frame 0 only)")
        masks = {oid: [(lab == oid).astype(np.float32) for lab in labels] for oid in object_ids}
        sequences.append(VideoSequence(name=seq_dir.name, frames=frames, masks=masks))
    if not sequences:
        raise DatasetError(f"{root}: no sequences found")
    return sequences


def write_masks(root_path, sequence_name, label_maps):
    """Write {0..K}-valued label maps as palette-indexed PNGs."""
    out_dir = Path(root_path) / sequence_name
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_dir}: {exc}") from exc
    palette = davis_palette()
    for t, labels in enumerate(label_maps):
        img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
        img.putpalette(palette)
        try:
            img.save(out_dir / f"{t:05d}.png")
        except OSError as exc:
            raise DatasetError(f"cannot write {out_dir / f'{t:05d}.png'}: {exc}") from exc


def label_map_from_masks(sequence: VideoSequence, t):
    """Combine a sequence's binary object masks at frame ``t`` into a label map."""
    h, w = sequence.frames[t].shape[1:]
    labels = np.zeros((h, w), dtype=np.int32)
    for oid in sequence.object_ids:
        labels[sequence.masks[oid][t] > 0.5] = oid
    return labels


def write_dataset(sequences, root_path):
    """Materialize sequences to the DAVIS layout (plus motion.txt if synthetic)."""
    root = Path(root_path)
    motion_lines = []
    for seq in sequences:
        img_dir = root / "JPEGImages" / seq.name
        img_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            arr = np.clip(np.round(frame.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(img_dir / f"{t:05d}.png")
        label_maps = [label_map_from_masks(seq, t) for t in range(seq.num_frames)]
        write_masks(root / "Annotations", seq.name, label_maps)
        if seq.poses:
            for oid, poses in sorted(seq.poses.items()):
                for t in range(1, len(poses)):
                    p0, p1 = poses[t - 1], poses[t]
                    motion_lines.append(
                        f"{seq.name} {t} {oid} {p1.cx - p0.cx:.6f} {p1.cy - p0.cy:.6f} "
                        f"{p1.theta - p0.theta:.6f} {p1.scale / p0.scale:.6f}")
    if motion_lines:
        (root / "motion.txt").write_text("\n".join(motion_lines) + "\n")
