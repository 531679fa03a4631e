"""Compact single-stage anchor detector coupled to the synthesizer.

The detection loss stays differentiable with respect to the input image,
which is what lets it supervise the generator during coupled training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import BBox2D
from .evaluation import iou


@dataclass
class Detection:
    bbox: BBox2D
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class DetectorConfig:
    image_size: int = 64
    stride: int = 8
    anchor_scales: tuple[float, ...] = (14.0, 21.0, 32.0)
    anchor_aspects: tuple[float, ...] = (0.8, 1.8)
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    head_channels: int = 64
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    nms_iou: float = 0.5
    score_thresh: float = 0.05
    max_detections: int = 40
    init_std: float = 0.02
    leak: float = 0.2

    def __post_init__(self) -> None:
        if self.stride != 2 ** len(self.backbone_channels):
            raise ValueError("backbone stage count must realize the anchor stride")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_aspects)


def build_anchors(config: DetectorConfig) -> np.ndarray:
    """Anchor boxes (A, 4) as x0, y0, x1, y1 over the stride-spaced grid;
    scales x aspects per cell, fixed for a resolution preset."""
    grid = config.image_size // config.stride
    shapes = []
    for scale in config.anchor_scales:
        for aspect in config.anchor_aspects:
            w = scale * math.sqrt(aspect)
            h = scale / math.sqrt(aspect)
            shapes.append((w, h))
    anchors = np.zeros((grid, grid, len(shapes), 4), dtype=np.float64)
    centers = (np.arange(grid) + 0.5) * config.stride
    for iy, cy in enumerate(centers):
        for ix, cx in enumerate(centers):
            for a, (w, h) in enumerate(shapes):
                anchors[iy, ix, a] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    return anchors.reshape(-1, 4)


class AnchorDetector(nn.Module):
    """Strided conv backbone plus objectness / box-offset heads."""

    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        self.config = config
        self.leak = config.leak
        layers = []
        ch = 3
        for out_ch in config.backbone_channels:
            conv = nn.Conv2d(ch, out_ch, 3, stride=2, padding=1)
            nn.init.normal_(conv.weight, std=config.init_std)
            nn.init.zeros_(conv.bias)
            layers.append(conv)
            ch = out_ch
        self.backbone = nn.ModuleList(layers)
        self.neck = nn.Conv2d(ch, config.head_channels, 3, padding=1)
        nn.init.normal_(self.neck.weight, std=config.init_std)
        nn.init.zeros_(self.neck.bias)
        k = config.anchors_per_cell
        self.obj_head = nn.Conv2d(config.head_channels, k, 1)
        self.box_head = nn.Conv2d(config.head_channels, 4 * k, 1)
        for head in (self.obj_head, self.box_head):
            nn.init.normal_(head.weight, std=config.init_std)
            nn.init.zeros_(head.bias)
        # Bias objectness toward "background" at init so early confidences
        # are low rather than 0.5.
        nn.init.constant_(self.obj_head.bias, -2.0)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(objectness logits (N, A), box deltas (N, A, 4)) in anchor order."""
        x = images
        for conv in self.backbone:
            x = F.leaky_relu(conv(x), self.leak)
        x = F.leaky_relu(self.neck(x), self.leak)
        n = x.shape[0]
        k = self.config.anchors_per_cell
        logits = self.obj_head(x).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.box_head(x).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return logits, deltas


def _centers_sizes(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sizes = boxes[:, 2:] - boxes[:, :2]
    centers = boxes[:, :2] + sizes / 2
    return centers, sizes


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Center offsets relative to anchor size plus log-scale size ratios."""
    a_c, a_s = _centers_sizes(anchors)
    b_c, b_s = _centers_sizes(boxes)
    return np.concatenate([(b_c - a_c) / a_s, np.log(b_s / a_s)], axis=1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Inverse of encode_boxes for (..., 4) tensors."""
    a_s = anchors[..., 2:] - anchors[..., :2]
    a_c = anchors[..., :2] + a_s / 2
    centers = deltas[..., :2] * a_s + a_c
    sizes = torch.exp(deltas[..., 2:]) * a_s
    return torch.cat([centers - sizes / 2, centers + sizes / 2], dim=-1)


def assign_targets(
    anchors: np.ndarray,
    annotations: Sequence[BBox2D],
    pos_iou: float = 0.5,
    neg_iou: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor labels (1 positive, 0 negative, -1 ignore) and encoded box
    targets for positives. Positive iff best IoU >= pos_iou, negative iff
    best IoU < neg_iou."""
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if not annotations:
        return labels, targets
    anchor_boxes = [BBox2D(*a) for a in anchors]
    ious = np.array([[iou(a, g) for g in annotations] for a in anchor_boxes])
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= pos_iou] = 1
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    pos = labels == 1
    if pos.any():
        gt_boxes = np.array([annotations[j].as_tuple() for j in best_gt[pos]])
        targets[pos] = encode_boxes(anchors[pos], gt_boxes)
    return labels, targets


def detection_loss(
    obj_logits: torch.Tensor,
    box_deltas: torch.Tensor,
    anchors: np.ndarray,
    annotations: Sequence[Sequence[BBox2D]],
    pos_iou: float = 0.5,
    neg_iou: float = 0.3,
) -> torch.Tensor:
    """Objectness BCE over positives and negatives plus smooth-L1 box
    regression over positives, summed and normalized by the positive count
    (floored at one)."""
    if obj_logits.shape[0] != len(annotations):
        raise ValueError("one annotation list per image required")
    device, dtype = obj_logits.device, obj_logits.dtype
    total = obj_logits.new_zeros(())
    n_pos = 0
    for i, boxes in enumerate(annotations):
        labels, targets = assign_targets(anchors, boxes, pos_iou, neg_iou)
        labels_t = torch.from_numpy(labels).to(device)
        keep = labels_t >= 0
        total = total + F.binary_cross_entropy_with_logits(
            obj_logits[i][keep], (labels_t[keep] > 0).to(dtype), reduction="sum"
        )
        pos = labels_t == 1
        if pos.any():
            target_t = torch.from_numpy(targets).to(device=device, dtype=dtype)
            total = total + F.smooth_l1_loss(
                box_deltas[i][pos], target_t[pos], reduction="sum"
            )
            n_pos += int(pos.sum())
    return total / max(n_pos, 1)


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression by descending confidence; candidates overlapping a
    kept detection with IoU > threshold are dropped. Ties keep the earlier
    index. Idempotent."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept: list[Detection] = []
    for i in order:
        cand = detections[i]
        if all(iou(cand.bbox, k.bbox) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def fit_detector(
    model: AnchorDetector,
    anchors: np.ndarray,
    images: np.ndarray,
    boxes: Sequence[Sequence[BBox2D]],
    epochs: int,
    lr: float,
    batch_size: int = 16,
    seed: int = 0,
    betas: tuple[float, float] = (0.9, 0.99),
) -> list[float]:
    """Train on an in-memory labeled image set; returns per-epoch mean loss.

    ``images`` is (N, H, W, 3) uint8; entries with empty box lists act as
    pure negatives.
    """
    from .utils import to_unit_range

    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=betas)
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch, 3]).permutation(len(images))
        losses = []
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            batch = to_unit_range(images[chunk])
            logits, deltas = model(batch)
            loss = detection_loss(logits, deltas, anchors, [boxes[i] for i in chunk])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
        history.append(float(np.mean(losses)))
    return history


def detect(
    model: AnchorDetector,
    images: torch.Tensor,
    anchors: np.ndarray,
) -> list[list[Detection]]:
    """NMS-filtered detections per image, boxes clipped to the frame."""
    config = model.config
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits, deltas = model(images)
            scores = torch.sigmoid(logits)
            anchor_t = torch.from_numpy(anchors).to(dtype=deltas.dtype, device=deltas.device)
            boxes = decode_boxes(anchor_t.unsqueeze(0), deltas)
    finally:
        model.train(was_training)
    size = float(config.image_size)
    results = []
    for i in range(images.shape[0]):
        keep = scores[i] >= config.score_thresh
        cands = []
        for score, box in zip(scores[i][keep].tolist(), boxes[i][keep].tolist()):
            x0 = min(max(box[0], 0.0), size)
            y0 = min(max(box[1], 0.0), size)
            x1 = min(max(box[2], 0.0), size)
            y1 = min(max(box[3], 0.0), size)
            if x1 - x0 >= 1.0 and y1 - y0 >= 1.0:
                cands.append(Detection(BBox2D(x0, y0, x1, y1), score))
        results.append(nms(cands, config.nms_iou)[: config.max_detections])
    return results
