"""Detection metrics: precision, recall, and mean average precision.

AP uses 101-point interpolation over the recall grid {0, .01, ..., 1}
with the precision envelope, per class, pooled over images.  mAP50 is
the class mean at IoU 0.5; the averaged metric spans thresholds 0.50 to
0.95 in steps of 0.05.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, Detection, boxes_to_array, pairwise_iou_matrix

IOU_GRID = np.arange(0.5, 0.96, 0.05)
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    precision: float
    recall: float
    map50: float
    map5095: float
    per_class_ap50: dict = field(default_factory=dict)


def _norm_gts(gts) -> tuple[np.ndarray, np.ndarray]:
    """Accept [(Box, cls), ...] or (boxes [M,4], classes [M]) arrays."""
    if isinstance(gts, tuple) and len(gts) == 2:
        boxes, classes = gts
        return (
            np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
            np.asarray(classes, dtype=np.int64).reshape(-1),
        )
    boxes = boxes_to_array([b for b, _ in gts])
    classes = np.array([c for _, c in gts], dtype=np.int64)
    return boxes, classes


def _norm_dets(dets: Sequence[Detection]):
    boxes = boxes_to_array([d.box for d in dets])
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return boxes, classes, scores


def match_detections(dets: Sequence[Detection], gts, iou_threshold: float) -> np.ndarray:
    """Greedy TP/FP flags for one image's detections.

    Detections must arrive sorted by descending confidence.  Each
    detection claims the unmatched same-class ground truth of highest
    IoU when that IoU reaches the threshold; each ground truth is
    claimed at most once.
    """
    if len(dets) == 0:
        return np.zeros(0, dtype=bool)
    boxes, classes, scores = _norm_dets(dets)
    if np.any(np.diff(scores) > 0.0):
        raise ValueError("match_detections: detections must be sorted by confidence")
    gt_boxes, gt_classes = _norm_gts(gts)
    flags = np.zeros(len(dets), dtype=bool)
    if gt_boxes.shape[0] == 0:
        return flags
    iou = pairwise_iou_matrix(boxes, gt_boxes)
    taken = np.zeros(gt_boxes.shape[0], dtype=bool)
    for i in range(len(dets)):
        candidates = (gt_classes == classes[i]) & ~taken & (iou[i] >= iou_threshold)
        if not candidates.any():
            continue
        masked = np.where(candidates, iou[i], -1.0)
        j = int(np.argmax(masked))
        taken[j] = True
        flags[i] = True
    return flags


def average_precision(flags: np.ndarray, confidences: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from pooled flags.

    Zero ground truths with detections present gives 0; the caller
    excludes classes with neither.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    flags = np.asarray(flags, dtype=bool)
    confidences = np.asarray(confidences, dtype=np.float64)
    if num_gt == 0 or flags.size == 0:
        return 0.0
    order = np.argsort(-confidences, kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    envelope = np.zeros_like(RECALL_GRID)
    for k, r in enumerate(RECALL_GRID):
        mask = recall >= r - 1e-12
        envelope[k] = precision[mask].max() if mask.any() else 0.0
    return float(envelope.mean())


def decode_detections(logits: np.ndarray, boxes: np.ndarray) -> list[Detection]:
    """Per query: winning class by sigmoid probability, box as decoded."""
    probs = 1.0 / (1.0 + np.exp(-logits))
    classes = probs.argmax(axis=1)
    scores = probs[np.arange(probs.shape[0]), classes]
    out = []
    for i in range(probs.shape[0]):
        b = boxes[i]
        out.append(
            Detection(
                box=Box(float(b[0]), float(b[1]), float(b[2]), float(b[3])),
                class_id=int(classes[i]),
                score=float(scores[i]),
                probs=probs[i],
            )
        )
    return out


def evaluate(dets_per_image, gts_per_image, num_classes: int) -> EvalResult:
    """Corpus metrics over post-NMS detections.

    A class with no ground truths and no detections is excluded from the
    AP means; with stray detections it contributes 0.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths disagree on image count")
    norm_gts = [_norm_gts(g) for g in gts_per_image]
    sorted_dets = [
        sorted(enumerate(dets), key=lambda t: (-t[1].score, t[0]))
        for dets in dets_per_image
    ]
    sorted_dets = [[d for _, d in img] for img in sorted_dets]

    # pooled per-class flags at every threshold
    ap = np.full((num_classes, IOU_GRID.size), np.nan)
    gt_counts = np.zeros(num_classes, dtype=np.int64)
    det_counts = np.zeros(num_classes, dtype=np.int64)
    for _, gcls in norm_gts:
        for c in gcls:
            gt_counts[c] += 1
    for dets in sorted_dets:
        for d in dets:
            det_counts[d.class_id] += 1

    tp50_total = 0
    det_total = 0
    for ti, thr in enumerate(IOU_GRID):
        per_class_flags: list[list] = [[] for _ in range(num_classes)]
        per_class_conf: list[list] = [[] for _ in range(num_classes)]
        for dets, gts in zip(sorted_dets, norm_gts):
            flags = match_detections(dets, gts, thr)
            for d, f in zip(dets, flags):
                per_class_flags[d.class_id].append(f)
                per_class_conf[d.class_id].append(d.score)
            if ti == 0:
                tp50_total += int(flags.sum())
                det_total += len(dets)
        for c in range(num_classes):
            if gt_counts[c] == 0 and det_counts[c] == 0:
                continue
            ap[c, ti] = average_precision(
                np.array(per_class_flags[c], dtype=bool),
                np.array(per_class_conf[c], dtype=np.float64),
                int(gt_counts[c]),
            )

    included = ~np.isnan(ap[:, 0])
    map50 = float(ap[included, 0].mean()) if included.any() else 0.0
    map5095 = float(ap[included, :].mean()) if included.any() else 0.0
    gt_total = int(gt_counts.sum())
    precision = tp50_total / det_total if det_total > 0 else 0.0
    recall = tp50_total / gt_total if gt_total > 0 else 0.0
    per_class = {
        int(c): float(ap[c, 0]) for c in range(num_classes) if included[c]
    }
    return EvalResult(
        precision=float(precision),
        recall=float(recall),
        map50=map50,
        map5095=map5095,
        per_class_ap50=per_class,
    )
