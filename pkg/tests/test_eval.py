"""Metric oracles and visualization properties.

boundary_f is validated against a brute-force oracle that computes explicit
nearest-boundary-pixel Euclidean distances with no distance transform;
jaccard against direct set arithmetic on 1,000 random mask pairs.
"""

import math

import numpy as np
import pytest

from warpseg.data_io import SyntheticSpec, generate_synthetic
from warpseg.diffarray import ShapeError
from warpseg.evaluation import (
    EvalReport,
    boundary_f,
    boundary_pixels,
    default_boundary_tolerance,
    evaluate,
    flow_colorize,
    jaccard,
    masked_warped_frame,
    warp_diff,
)
from warpseg.losses import soft_iou


# ---------------------------------------------------------------------------
# brute-force oracles


def brute_jaccard(pred, gt):
    p, g = pred > 0.5, gt > 0.5
    inter = int(np.sum(p & g))
    union = int(np.sum(p | g))
    return 1.0 if union == 0 else inter / union


def brute_boundary(mask):
    m = mask > 0.5
    h, w = m.shape
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or not m[ny, nx]:
                    out[y, x] = True
                    break
    return out


def brute_boundary_f(pred, gt, tol):
    pb = [(y, x) for y, x in zip(*np.nonzero(brute_boundary(pred)))]
    gb = [(y, x) for y, x in zip(*np.nonzero(brute_boundary(gt)))]
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0

    def matched(points, targets):
        hits = 0
        for y, x in points:
            d = min(math.hypot(y - ty, x - tx) for ty, tx in targets)
            hits += d <= tol
        return hits / len(points)

    precision = matched(pb, gb)
    recall = matched(gb, pb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def random_mask_pairs(n, rng, max_size=8):
    for _ in range(n):
        h, w = int(rng.integers(2, max_size + 1)), int(rng.integers(2, max_size + 1))
        density = rng.uniform(0.1, 0.9)
        yield ((rng.random((h, w)) < density).astype(np.float32),
               (rng.random((h, w)) < density).astype(np.float32))


def test_jaccard_matches_brute_force_1000_pairs():
    rng = np.random.default_rng(0)
    for pred, gt in random_mask_pairs(1000, rng):
        assert abs(jaccard(pred, gt) - brute_jaccard(pred, gt)) <= 1e-9


def test_boundary_f_matches_brute_force_1000_pairs():
    rng = np.random.default_rng(1)
    for pred, gt in random_mask_pairs(1000, rng):
        tol = default_boundary_tolerance(pred.shape)
        assert boundary_f(pred, gt) == pytest.approx(brute_boundary_f(pred, gt, tol), abs=1e-12)


def test_boundary_pixels_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        mask = (rng.random((int(rng.integers(2, 10)), int(rng.integers(2, 10)))) < 0.5)
        np.testing.assert_array_equal(boundary_pixels(mask), brute_boundary(mask))


def test_jaccard_equals_soft_iou_on_binary_masks():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = (rng.random((7, 7)) < 0.5).astype(np.float32)
        b = (rng.random((7, 7)) < 0.5).astype(np.float32)
        assert abs(jaccard(a, b) - float(soft_iou(a, b).data)) <= 1e-6


def test_jaccard_edge_cases():
    z = np.zeros((4, 4))
    o = np.ones((4, 4))
    assert jaccard(z, z) == 1.0
    assert jaccard(o, o) == 1.0
    assert jaccard(z, o) == 0.0


def test_boundary_f_edge_cases():
    z = np.zeros((5, 5))
    box = np.zeros((5, 5))
    box[1:4, 1:4] = 1.0
    assert boundary_f(z, z) == 1.0
    assert boundary_f(box, z) == 0.0
    assert boundary_f(z, box) == 0.0
    assert boundary_f(box, box) == 1.0


def test_default_tolerance_formula():
    assert default_boundary_tolerance((480, 854)) == math.ceil(0.008 * math.hypot(480, 854))
    assert default_boundary_tolerance((64, 64)) == 1


def test_metric_shape_validation():
    with pytest.raises(ShapeError):
        jaccard(np.zeros((3, 3)), np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        boundary_f(np.zeros((3, 3)), np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        jaccard(np.zeros((3, 3, 3)), np.zeros((3, 3, 3)))


# ---------------------------------------------------------------------------
# aggregation


def small_dataset():
    return generate_synthetic(SyntheticSpec(num_sequences=3, frames_per_sequence=4,
                                            height=32, width=32, translation_px=(2.0, 6.0),
                                            seed=9))


def gt_as_predictions(seqs):
    return {s.name: {oid: list(s.masks[oid]) for oid in s.object_ids} for s in seqs}


def test_evaluate_perfect_predictions_score_one():
    seqs = small_dataset()
    report = evaluate(gt_as_predictions(seqs), seqs)
    assert report.global_j == 1.0
    assert report.global_f == 1.0
    assert report.global_jf == 1.0


def test_evaluate_excludes_frame_zero_by_default():
    seqs = small_dataset()
    preds = gt_as_predictions(seqs)
    for seq in seqs:  # corrupt only the reference frame
        for oid in seq.object_ids:
            preds[seq.name][oid][0] = np.zeros_like(preds[seq.name][oid][0])
    assert evaluate(preds, seqs).global_j == 1.0
    assert evaluate(preds, seqs, first_frame_excluded=False).global_j < 1.0


def test_evaluate_permutation_invariant():
    seqs = small_dataset()
    preds = gt_as_predictions(seqs)
    for seq in seqs:  # degrade frame 2 so scores are non-trivial
        for oid in seq.object_ids:
            preds[seq.name][oid][2] = np.roll(preds[seq.name][oid][2], 3, axis=1)
    r1 = evaluate(preds, seqs)
    r2 = evaluate(preds, list(reversed(seqs)))
    assert r1.global_j == r2.global_j
    assert r1.global_f == r2.global_f
    assert r1.per_sequence == r2.per_sequence


def test_evaluate_validates_structure():
    seqs = small_dataset()
    preds = gt_as_predictions(seqs)
    with pytest.raises(ValueError):
        evaluate({k: v for k, v in list(preds.items())[:-1]}, seqs)
    bad = gt_as_predictions(seqs)
    bad[seqs[0].name][99] = bad[seqs[0].name].pop(seqs[0].object_ids[0])
    with pytest.raises(ValueError):
        evaluate(bad, seqs)
    short = gt_as_predictions(seqs)
    short[seqs[0].name][seqs[0].object_ids[0]].pop()
    with pytest.raises(ValueError):
        evaluate(short, seqs)


def test_report_to_dict_layout():
    report = EvalReport(0.5, 0.7, {"a": {"J": 0.5, "F": 0.7, "JF": 0.6}}, {},
                        temporal_stability=0.9)
    d = report.to_dict()
    assert d["global"] == {"J": 0.5, "F": 0.7, "JF": 0.6}
    assert d["temporal_stability"] == 0.9
    assert "temporal_stability" not in EvalReport(0.5, 0.7).to_dict()


# ---------------------------------------------------------------------------
# visualization


def test_flow_colorize_scale_covariance():
    rng = np.random.default_rng(4)
    flow = rng.standard_normal((2, 8, 8)).astype(np.float32) * 0.1
    c1 = flow_colorize(flow)
    c2 = flow_colorize(flow * 2.0)
    np.testing.assert_allclose(c1, c2, atol=1e-5)


def test_flow_colorize_zero_flow_is_white():
    img = flow_colorize(np.zeros((2, 4, 4), dtype=np.float32))
    np.testing.assert_allclose(img, np.ones((3, 4, 4)))


def test_flow_colorize_range_and_shape():
    rng = np.random.default_rng(5)
    img = flow_colorize(rng.standard_normal((2, 6, 6)).astype(np.float32))
    assert img.shape == (3, 6, 6)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_warp_diff_highlights_lost_pixels():
    prev = np.zeros((4, 4))
    warped = np.zeros((4, 4))
    prev[1, 1] = prev[2, 2] = 1.0
    warped[1, 1] = 1.0
    img = warp_diff(prev, warped)
    assert img.shape == (3, 4, 4)
    assert img[0, 2, 2] == 1.0  # lost pixel flagged at full intensity
    assert img[0, 1, 1] == pytest.approx(0.3)  # retained foreground dimmed
    assert img[0, 0, 0] == 0.0


def test_masked_warped_frame():
    frame = np.ones((3, 2, 2), dtype=np.float32)
    mask = np.array([[1.0, 0.0], [0.5, 1.0]], dtype=np.float32)
    out = masked_warped_frame(frame, mask)
    np.testing.assert_allclose(out[0], mask)
