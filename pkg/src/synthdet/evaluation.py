"""Detection metrics: IoU, greedy matching, average precision, PR curves,
plus feature-distribution scores (KID, FID) for synthesized-image quality.

All detection-level metrics operate on parallel per-image lists so that
ranking is global across the evaluation split. Single-class protocol:
mAP equals AP.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox2D


def iou(a: BBox2D, b: BBox2D) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _confidence_order(dets: Sequence) -> list[int]:
    # Descending confidence, ties broken by earlier original index.
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def match_detections(dets: Sequence, gts: Sequence[BBox2D], iou_thresh: float) -> np.ndarray:
    """Greedy TP/FP labeling.

    Detections are processed in descending confidence order; each one
    matches the unmatched ground-truth box of highest IoU provided that
    IoU >= iou_thresh. Returns a boolean TP flag per detection in the
    original input order. Each ground box is used at most once.
    """
    tp = np.zeros(len(dets), dtype=bool)
    matched = [False] * len(gts)
    for i in _confidence_order(dets):
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            v = iou(dets[i].bbox, gt)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[best_j] = True
            tp[i] = True
    return tp


def _ranked_tp_flags(
    detections: Sequence[Sequence],
    ground_truths: Sequence[Sequence[BBox2D]],
    iou_thresh: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Globally confidence-ranked (confidences, tp flags, n_gt)."""
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground_truths must be parallel lists")
    confs: list[float] = []
    flags: list[bool] = []
    n_gt = 0
    for dets, gts in zip(detections, ground_truths):
        n_gt += len(gts)
        tp = match_detections(dets, gts, iou_thresh)
        confs.extend(d.confidence for d in dets)
        flags.extend(bool(t) for t in tp)
    conf_arr = np.asarray(confs, dtype=np.float64)
    flag_arr = np.asarray(flags, dtype=bool)
    order = np.argsort(-conf_arr, kind="stable")
    return conf_arr[order], flag_arr[order], n_gt


@dataclass
class PRCurve:
    """Precision over a nondecreasing recall grid, with the detection count."""

    recalls: np.ndarray
    precisions: np.ndarray
    iou_thresh: float
    n_detections: int

    def __post_init__(self) -> None:
        if np.any(np.diff(self.recalls) < 0):
            raise ValueError("recall grid must be nondecreasing")
        if np.any((self.precisions < 0) | (self.precisions > 1)):
            raise ValueError("precision values must lie in [0, 1]")


def pr_curve(
    detections: Sequence[Sequence],
    ground_truths: Sequence[Sequence[BBox2D]],
    iou_thresh: float,
) -> PRCurve:
    """Raw precision-recall points in global confidence ranking."""
    _, flags, n_gt = _ranked_tp_flags(detections, ground_truths, iou_thresh)
    if n_gt == 0:
        warnings.warn("PR curve with zero ground-truth boxes")
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    recalls = tp_cum / max(n_gt, 1)
    precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    return PRCurve(recalls, precisions, iou_thresh, len(flags))


def average_precision(
    detections: Sequence[Sequence],
    ground_truths: Sequence[Sequence[BBox2D]],
    iou_thresh: float,
) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    _, flags, n_gt = _ranked_tp_flags(detections, ground_truths, iou_thresh)
    if n_gt == 0:
        warnings.warn("average precision undefined without ground truth; returning 0")
        return 0.0
    if len(flags) == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # Precision envelope: running max from the right.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def mean_average_precision(
    detections: Sequence[Sequence],
    ground_truths: Sequence[Sequence[BBox2D]],
    iou_thresh: float = 0.5,
) -> float:
    """Single object class, so mAP reduces to AP."""
    return average_precision(detections, ground_truths, iou_thresh)


@dataclass
class _UnitDetection:
    bbox: BBox2D
    confidence: float = 1.0


def annotation_quality(
    projected_labels: Sequence[Sequence[BBox2D]],
    oracle_boxes: Sequence[Sequence[BBox2D]],
    iou_thresh: float = 0.5,
) -> float:
    """mAP of projected labels, scored as unit-confidence detections
    against the reference boxes of the matching scenes."""
    dets = [[_UnitDetection(b) for b in labels] for labels in projected_labels]
    return average_precision(dets, oracle_boxes, iou_thresh)


def _polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kid(a: np.ndarray, b: np.ndarray) -> float:
    """Unbiased squared MMD with the degree-3 polynomial kernel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ValueError("kid requires at least 2 samples per side")
    kaa = _polynomial_kernel(a, a)
    kbb = _polynomial_kernel(b, b)
    kab = _polynomial_kernel(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    term_ab = 2.0 * kab.mean()
    return float(term_a + term_b - term_ab)


def _psd_sqrt(mat: np.ndarray, tol: float = -1e-6) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    scale = max(float(vals.max()), 1.0)
    if vals.min() < tol * scale:
        warnings.warn(
            f"ill-conditioned covariance (min eigenvalue {vals.min():.3e}); clamping"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between Gaussian moment fits of two feature sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("fid requires at least 2 samples per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh(inner)
    scale = max(float(vals.max()), 1.0)
    if vals.min() < -1e-6 * scale:
        warnings.warn(
            f"ill-conditioned covariance product (min eigenvalue {vals.min():.3e}); clamping"
        )
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(value, 0.0)
