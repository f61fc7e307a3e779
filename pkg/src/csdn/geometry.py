"""Bounding-box algebra: IoU, GIoU, overlap adjacency, NMS, conversions.

Boxes are normalized center-form (cx, cy, w, h) in the unit square.
Adjacency between queries is strict overlap (IoU > 0): boxes that share
only an edge are not neighbors, but every box neighbors itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not all(np.isfinite([self.cx, self.cy, self.w, self.h])):
            raise ValueError(f"box fields must be finite: {self}")
        if self.w < 0.0 or self.h < 0.0:
            raise ValueError(f"box sides must be non-negative: {self}")

    def corners(self) -> tuple[float, float, float, float]:
        return box_to_corners(self)

    def area(self) -> float:
        return self.w * self.h


@dataclass
class Detection:
    """One decoded prediction: box, winning class, confidence, class scores."""

    box: Box
    class_id: int
    score: float
    probs: Optional[np.ndarray] = None


@dataclass
class NeighborMask:
    n: int
    allowed: np.ndarray  # [n, n] bool, symmetric, diagonal True

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.shape != (self.n, self.n):
            raise ValueError(
                f"mask shape {self.allowed.shape} does not match n={self.n}"
            )


def box_to_corners(b: Box) -> tuple[float, float, float, float]:
    return (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0)


def corners_to_box(x1: float, y1: float, x2: float, y2: float) -> Box:
    return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """[N, 4] center-form array from Box values."""
    return np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64).reshape(
        len(boxes), 4
    )


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(float(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in arr]


def center_to_corner_array(arr: np.ndarray) -> np.ndarray:
    """[N, 4] cxcywh -> [N, 4] x1y1x2y2."""
    arr = np.asarray(arr, dtype=np.float64)
    out = np.empty_like(arr)
    out[..., 0] = arr[..., 0] - arr[..., 2] / 2.0
    out[..., 1] = arr[..., 1] - arr[..., 3] / 2.0
    out[..., 2] = arr[..., 0] + arr[..., 2] / 2.0
    out[..., 3] = arr[..., 1] + arr[..., 3] / 2.0
    return out


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has zero area.

    All areas derive from corner coordinates so identical boxes give
    exactly 1.0 (same arithmetic as the pairwise kernel)."""
    ax1, ay1, ax2, ay2 = box_to_corners(a)
    bx1, by1, bx2, by2 = box_to_corners(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0.0 else 0.0


def giou(a: Box, b: Box) -> float:
    """IoU minus the normalized empty share of the smallest enclosing box.

    Returns 0 when the enclosing box is degenerate (both boxes collapse
    onto one point).
    """
    ax1, ay1, ax2, ay2 = box_to_corners(a)
    bx1, by1, bx2, by2 = box_to_corners(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enc = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if enc <= 0.0:
        return 0.0
    iou_val = inter / union if union > 0.0 else 0.0
    return iou_val - (enc - union) / enc


def pairwise_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU for every pair of center-form boxes: [N, 4] x [M, 4] -> [N, M]."""
    ca = np.ascontiguousarray(center_to_corner_array(a))
    cb = np.ascontiguousarray(center_to_corner_array(b))
    return kernels.pairwise_iou(ca, cb)


def neighbor_mask(boxes) -> NeighborMask:
    """Overlap adjacency: allowed[i, j] iff IoU(box_i, box_j) > 0.

    The diagonal is forced true so each query always attends to itself,
    zero-area boxes included.
    """
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(list(boxes))
    if arr.shape[0] < 1:
        raise ValueError("neighbor_mask: need at least one box")
    mat = pairwise_iou_matrix(arr, arr)
    allowed = mat > 0.0
    np.fill_diagonal(allowed, True)
    return NeighborMask(n=arr.shape[0], allowed=allowed)


def nms(
    dets: Sequence[Detection], conf_threshold: float, iou_threshold: float
) -> list[Detection]:
    """Greedy class-aware suppression.

    Detections below conf_threshold are dropped; the rest are visited in
    descending confidence (ties by original index) and a detection is
    suppressed when it overlaps an already-kept same-class detection with
    IoU above iou_threshold.
    """
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= iou_threshold <= 1.0):
        raise ValueError("nms: thresholds must lie in [0, 1]")
    alive = [(i, d) for i, d in enumerate(dets) if d.score >= conf_threshold]
    if not alive:
        return []
    order = sorted(range(len(alive)), key=lambda k: (-alive[k][1].score, alive[k][0]))
    boxes = np.ascontiguousarray(
        center_to_corner_array(
            boxes_to_array([alive[k][1].box for k in order])
        )
    )
    classes = np.array([alive[k][1].class_id for k in order], dtype=np.int64)
    keep = kernels.nms_keep(boxes, classes, iou_threshold)
    return [alive[order[i]][1] for i in range(len(order)) if keep[i]]
