"""Command-line surface: gen / train / infer / eval / viz.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import diffarray as da
from .config import ConfigError, load_configs
from .data_io import (
    DatasetError,
    generate_synthetic,
    read_davis_layout,
    write_dataset,
    write_masks,
)
from .diffarray import DiffArray, load_checkpoint, save_checkpoint
from .evaluation import evaluate, flow_colorize, masked_warped_frame, warp_diff
from .flownet import FlowNet
from .segmenter import SegNet, merge_objects
from .training import TrainerState, TrainingError, train
from .warp import FloFormatError, bilinear_warp, read_flo, write_flo


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def infer_sequence(flow_net: FlowNet, flow_params, seg_net: SegNet, seg_params,
                   frames, first_masks):
    """Semi-supervised propagation through one sequence.

    Only the frame-0 masks in ``first_masks`` (object id -> mask) are
    consumed; later masks are the model's own predictions. Returns
    (label maps per frame, per-object probability masks, per-object flows).
    """
    object_ids = sorted(first_masks)
    probs = {oid: [np.asarray(first_masks[oid], dtype=np.float32)] for oid in object_ids}
    flows = {oid: [] for oid in object_ids}
    with da.no_grad():
        for t in range(1, len(frames)):
            for oid in object_ids:
                prev_mask = probs[oid][-1]
                flow = flow_net.forward(flow_params, frames[t - 1], frames[t], prev_mask)
                warped = bilinear_warp(prev_mask, flow)
                pred = seg_net.forward(seg_params, frames[t], prev_mask, warped)
                probs[oid].append(pred.data)
                flows[oid].append(flow.data)
    label_maps = [merge_objects([probs[oid][t] for oid in object_ids])
                  for t in range(len(frames))]
    # frame 0 keeps the given reference labels
    if object_ids:
        ref = np.zeros_like(label_maps[0])
        for i, oid in enumerate(object_ids):
            ref[np.asarray(first_masks[oid]) > 0.5] = i + 1
        label_maps[0] = ref
    # per-object binary masks from the merged labels, reported under real ids
    per_object = {oid: [(lm == i + 1).astype(np.float32) for lm in label_maps]
                  for i, oid in enumerate(object_ids)}
    return label_maps, per_object, flows


def _save_image(path, img):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def _save_model(out_dir, state: TrainerState):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "flow.ckpt", state.flow_params)
    save_checkpoint(out / "seg.ckpt", state.seg_params)
    lines = []
    for section, cfg in (("flow", state.flow_net.cfg), ("seg", state.seg_net.cfg)):
        for f in dataclasses.fields(cfg):
            lines.append(f"{section}.{f.name} = {getattr(cfg, f.name)}")
    (out / "model.cfg").write_text("\n".join(lines) + "\n")


def _load_model(ckpt_dir):
    ckpt = Path(ckpt_dir)
    if not (ckpt / "flow.ckpt").exists() or not (ckpt / "seg.ckpt").exists():
        raise DatasetError(f"{ckpt}: missing flow.ckpt/seg.ckpt")
    cfgs = load_configs(ckpt / "model.cfg") if (ckpt / "model.cfg").exists() else None
    flow_net = FlowNet(cfgs["flow"] if cfgs else None)
    seg_net = SegNet(cfgs["seg"] if cfgs else None)
    flow_params = {k: DiffArray(v) for k, v in load_checkpoint(ckpt / "flow.ckpt").items()}
    seg_params = {k: DiffArray(v) for k, v in load_checkpoint(ckpt / "seg.ckpt").items()}
    return flow_net, flow_params, seg_net, seg_params


def _cmd_gen(args):
    cfgs = load_configs(args.spec)
    sequences = generate_synthetic(cfgs["data"])
    write_dataset(sequences, args.out)
    print(f"wrote {len(sequences)} sequences to {args.out}")
    return 0


def _cmd_train(args):
    cfgs = load_configs(args.config)
    dataset = read_davis_layout(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as log:
        def on_epoch(epoch, metrics):
            log.write(json.dumps({"epoch": epoch, **metrics}) + "\n")
            log.flush()
            print(f"epoch {epoch}: total {metrics['total']:.4f}")

        state = train(dataset, cfgs["train"], cfgs["flow"], cfgs["seg"], on_epoch=on_epoch)
    _save_model(out, state)
    print(f"checkpoints and {log_path.name} written to {out}")
    return 0


def _cmd_infer(args):
    flow_net, flow_params, seg_net, seg_params = _load_model(args.ckpt)
    dataset = read_davis_layout(args.data)
    for seq in dataset:
        first_masks = {oid: seq.masks[oid][0] for oid in seq.object_ids}
        label_maps, _, flows = infer_sequence(
            flow_net, flow_params, seg_net, seg_params, seq.frames, first_masks)
        write_masks(args.out, seq.name, label_maps)
        if args.dump_flows:
            flo_dir = Path(args.dump_flows) / seq.name
            flo_dir.mkdir(parents=True, exist_ok=True)
            for oid in seq.object_ids:
                for t, flow in enumerate(flows[oid], start=1):
                    write_flo(flo_dir / f"{t:05d}_{oid}.flo", flow)
        if args.viz:
            viz_dir = Path(args.viz) / seq.name
            viz_dir.mkdir(parents=True, exist_ok=True)
            _write_viz(viz_dir, seq, flows)
        print(f"{seq.name}: {len(label_maps)} frames")
    return 0


def _write_viz(viz_dir, seq, flows):
    with da.no_grad():
        for oid in seq.object_ids:
            prev_mask = seq.masks[oid][0]
            for t, flow in enumerate(flows[oid], start=1):
                warped_mask = bilinear_warp(prev_mask, DiffArray(flow)).data
                warped_frame = bilinear_warp(seq.frames[t - 1], DiffArray(flow)).data
                _save_image(viz_dir / f"{t:05d}_{oid}_flow.png", flow_colorize(flow))
                _save_image(viz_dir / f"{t:05d}_{oid}_diff.png",
                            warp_diff(prev_mask, warped_mask))
                _save_image(viz_dir / f"{t:05d}_{oid}_warped.png",
                            masked_warped_frame(warped_frame, warped_mask))
                prev_mask = warped_mask


def _cmd_eval(args):
    gt = read_davis_layout(args.gt)
    pred_root = Path(args.pred)
    pred_sequences = {}
    for seq in gt:
        seq_dir = pred_root / seq.name
        if not seq_dir.is_dir():
            raise DatasetError(f"{seq_dir}: missing predictions for sequence {seq.name}")
        paths = sorted(seq_dir.glob("*.png"))
        if len(paths) != seq.num_frames:
            raise DatasetError(f"{seq_dir}: {len(paths)} prediction frames for "
                               f"{seq.num_frames} ground-truth frames")
        labels = [np.asarray(Image.open(p)) for p in paths]
        pred_sequences[seq.name] = {
            oid: [(lab == oid).astype(np.float32) for lab in labels]
            for oid in seq.object_ids}
    try:
        report = evaluate(pred_sequences, gt)
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"J {report.global_j:.4f}  F {report.global_f:.4f}  J&F {report.global_jf:.4f}")
    return 0


def _cmd_viz(args):
    flow = read_flo(args.flow)
    _save_image(args.out, flow_colorize(flow))
    return 0


def build_parser():
    parser = _Parser(prog="warpseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="config file with data.* keys")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train flow module and segmenter")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="semi-supervised mask propagation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="prediction mask directory")
    p.add_argument("--dump-flows", default=None)
    p.add_argument("--viz", default=None)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="DAVIS-protocol metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("viz", help="colorize a .flo flow field")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_viz)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DatasetError, FloFormatError, ConfigError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
