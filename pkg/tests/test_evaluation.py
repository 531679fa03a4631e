import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthdet.detector import Detection
from synthdet.evaluation import (
    annotation_quality,
    average_precision,
    fid,
    iou,
    kid,
    match_detections,
    pr_curve,
)
from synthdet.geometry import BBox2D


def det(x0, y0, x1, y1, conf):
    return Detection(BBox2D(x0, y0, x1, y1), conf)


def random_instance(rng, n_dets=6, n_gts=4, size=40):
    def boxes(n):
        out = []
        for _ in range(n):
            x0, y0 = rng.uniform(0, size - 6, 2)
            w, h = rng.uniform(2, 12, 2)
            out.append(BBox2D(x0, y0, x0 + w, y0 + h))
        return out

    dets = [Detection(b, float(rng.uniform(0.05, 1.0)))
            for b in boxes(rng.integers(0, n_dets + 1))]
    return dets, boxes(rng.integers(1, n_gts + 1))


def reference_match(dets, gts, thresh):
    """Independent greedy matcher with explicit loops."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    used = set()
    tp = [False] * len(dets)
    for i in order:
        best, best_j = 0.0, None
        for j in range(len(gts)):
            if j in used:
                continue
            v = iou(dets[i].bbox, gts[j])
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thresh:
            used.add(best_j)
            tp[i] = True
    return tp


def reference_ap(dets, gts, thresh):
    """All-point AP via explicit precision-envelope scan."""
    tp = reference_match(dets, gts, thresh)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    flags = [tp[i] for i in order]
    n_gt = len(gts)
    ap = 0.0
    prev_recall = 0.0
    cum_tp = 0
    for k, flag in enumerate(flags):
        cum_tp += int(flag)
        recall = cum_tp / n_gt
        if recall > prev_recall:
            # best precision at any rank >= k
            best_prec = 0.0
            c_tp = 0
            for k2, f2 in enumerate(flags):
                c_tp += int(f2)
                if k2 >= k:
                    best_prec = max(best_prec, c_tp / (k2 + 1))
            ap += (recall - prev_recall) * best_prec
            prev_recall = recall
    return ap


def test_iou_examples():
    a = BBox2D(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox2D(5, 5, 7, 7)) == 0.0
    assert iou(a, BBox2D(1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_match_single_pair():
    gt = [BBox2D(0, 0, 10, 10)]
    assert list(match_detections([det(0, 0, 10, 10, 0.9)], gt, 0.5)) == [True]


def test_match_two_dets_one_gt():
    gt = [BBox2D(0, 0, 10, 10)]
    dets = [det(0, 0, 10, 10, 0.9), det(1, 1, 10, 10, 0.8)]
    assert list(match_detections(dets, gt, 0.5)) == [True, False]


def test_match_hand_case_vs_oracle():
    gts = [BBox2D(0, 0, 10, 10), BBox2D(20, 0, 30, 10), BBox2D(0, 20, 10, 30)]
    dets = [
        det(1, 0, 11, 10, 0.7),
        det(19, 0, 29, 10, 0.95),
        det(0, 21, 10, 31, 0.8),
        det(2, 2, 12, 12, 0.9),
    ]
    got = list(match_detections(dets, gts, 0.5))
    assert got == reference_match(dets, gts, 0.5)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10_000))
def test_match_uses_each_gt_once(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_instance(rng)
    tp = match_detections(dets, gts, 0.5)
    assert tp.sum() <= len(gts)
    assert list(tp) == reference_match(dets, gts, 0.5)


def test_ap_perfect_and_empty():
    gts = [[BBox2D(0, 0, 10, 10)], [BBox2D(5, 5, 20, 20)]]
    perfect = [[det(*g[0].as_tuple(), 0.9)] for g in gts]
    assert average_precision(perfect, gts, 0.5) == pytest.approx(1.0)
    assert average_precision([[], []], gts, 0.5) == 0.0
    with pytest.warns(UserWarning):
        assert average_precision([[det(0, 0, 5, 5, 0.5)]], [[]], 0.5) == 0.0


def test_ap_hand_case_frozen():
    # ranked flags [TP, FP, TP] over 2 gts: AP = 0.5 * 1 + 0.5 * (2/3) = 5/6
    gts = [[BBox2D(0, 0, 10, 10), BBox2D(20, 20, 30, 30)]]
    dets = [[
        det(0, 0, 10, 10, 0.9),
        det(50, 50, 60, 60, 0.8),
        det(20, 20, 30, 30, 0.7),
    ]]
    assert average_precision(dets, gts, 0.5) == pytest.approx(5 / 6)
    assert average_precision(dets, gts, 0.5) == pytest.approx(
        reference_ap(dets[0], gts[0], 0.5))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_confidence_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_instance(rng)
    base = average_precision([dets], [gts], 0.5)
    squashed = [Detection(d.bbox, float(1 / (1 + np.exp(-6 * (d.confidence - 0.5)))))
                for d in dets]
    assert average_precision([squashed], [gts], 0.5) == pytest.approx(base)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_threshold_monotone(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_instance(rng)
    ap_50 = average_precision([dets], [gts], 0.5)
    ap_45 = average_precision([dets], [gts], 0.45)
    assert ap_45 >= ap_50 - 1e-12


def test_pr_curve_shape_and_monotone_recall():
    gts = [[BBox2D(0, 0, 10, 10), BBox2D(20, 20, 30, 30)]]
    dets = [[det(0, 0, 10, 10, 0.9), det(50, 50, 60, 60, 0.8),
             det(20, 20, 30, 30, 0.7)]]
    curve = pr_curve(dets, gts, 0.5)
    assert curve.n_detections == 3
    assert np.all(np.diff(curve.recalls) >= 0)
    assert np.all((curve.precisions >= 0) & (curve.precisions <= 1))


def test_pr_curve_empty_detections():
    curve = pr_curve([[]], [[BBox2D(0, 0, 5, 5)]], 0.5)
    assert curve.n_detections == 0
    assert curve.recalls.size == 0


def test_annotation_quality_perfect():
    boxes = [[BBox2D(4, 4, 20, 16)], [BBox2D(10, 12, 40, 30), BBox2D(1, 1, 9, 9)]]
    assert annotation_quality(boxes, boxes) == pytest.approx(1.0)


def test_annotation_quality_mismatch_drops():
    oracle = [[BBox2D(0, 0, 10, 10)]]
    labels = [[BBox2D(30, 30, 40, 40)]]
    assert annotation_quality(labels, oracle) == 0.0


def _kid_oracle(a, b):
    d = a.shape[1]
    m, n = len(a), len(b)
    k = lambda x, y: (float(x @ y) / d + 1.0) ** 3
    s_aa = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j)
    s_bb = sum(k(b[i], b[j]) for i in range(n) for j in range(n) if i != j)
    s_ab = sum(k(a[i], b[j]) for i in range(m) for j in range(n))
    return s_aa / (m * (m - 1)) + s_bb / (n * (n - 1)) - 2 * s_ab / (m * n)


def test_kid_hand_instance_vs_kernel_oracle():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(5, 4))
    assert kid(a, b) == pytest.approx(_kid_oracle(a, b), rel=1e-12)


def test_kid_unbiased_near_zero_on_same_distribution():
    rng = np.random.default_rng(0)
    values = [kid(rng.normal(size=(100, 8)), rng.normal(size=(100, 8)))
              for _ in range(10)]
    # unbiased estimator of 0; allow three standard errors
    assert abs(np.mean(values)) <= 3 * np.std(values) / np.sqrt(len(values)) + 1e-3


def test_fid_identical_sets_zero():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(50, 6))
    assert fid(a, a) <= 1e-8


def test_fid_symmetry_and_positivity():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(60, 5))
    b = rng.normal(loc=0.5, size=(55, 5))
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)
    assert fid(a, b) > 0


def test_fid_warns_when_ill_conditioned():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(10, 1))
    # rank-deficient in 12 dims from 10 samples
    a = np.hstack([base] * 12) + rng.normal(scale=1e-9, size=(10, 12))
    b = rng.normal(size=(40, 12))
    fid(a, b)  # regularized path must not raise
