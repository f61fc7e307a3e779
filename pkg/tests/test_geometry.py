"""Box algebra against an independent corner-form oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csdn.geometry import (
    Box,
    Detection,
    box_to_corners,
    boxes_to_array,
    corners_to_box,
    giou,
    iou,
    neighbor_mask,
    nms,
    pairwise_iou_matrix,
)

# -- corner-form oracle (kept deliberately naive) ---------------------------


def oracle_iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = box_to_corners(a)
    bx1, by1, bx2, by2 = box_to_corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def oracle_giou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = box_to_corners(a)
    bx1, by1, bx2, by2 = box_to_corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enc = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if enc <= 0:
        return 0.0
    i = inter / union if union > 0 else 0.0
    return i - (enc - union) / enc


def random_box(rng) -> Box:
    cx, cy = rng.uniform(0.05, 0.95, size=2)
    w, h = rng.uniform(0.0, 0.5, size=2)
    return Box(float(cx), float(cy), float(w), float(h))


class TestIoU:
    def test_identical_boxes(self):
        b = Box(0.5, 0.5, 0.3, 0.3)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(Box(0.2, 0.5, 0.1, 0.1), Box(0.8, 0.5, 0.1, 0.1)) == 0.0

    def test_known_overlap_case(self):
        # frozen from the corner-form oracle: inter .12, union .2
        a = Box(0.5, 0.5, 0.4, 0.4)
        b = Box(0.6, 0.5, 0.4, 0.4)
        assert iou(a, b) == pytest.approx(0.6, abs=1e-15)
        assert iou(a, b) == pytest.approx(oracle_iou(a, b), abs=1e-15)

    def test_zero_area_boxes(self):
        z = Box(0.5, 0.5, 0.0, 0.0)
        assert iou(z, z) == 0.0
        assert iou(z, Box(0.5, 0.5, 0.2, 0.2)) == 0.0

    def test_matches_oracle_randomly(self, rng):
        for _ in range(2000):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == pytest.approx(oracle_iou(a, b), abs=1e-12)


class TestGIoU:
    def test_identical_boxes(self):
        b = Box(0.4, 0.4, 0.2, 0.5)
        assert giou(b, b) == 1.0

    def test_edge_contact_squares(self):
        a = Box(0.25, 0.5, 0.5, 0.5)
        b = Box(0.75, 0.5, 0.5, 0.5)
        assert giou(a, b) == 0.0
        assert iou(a, b) == 0.0

    def test_distant_boxes_frozen_value(self):
        # frozen from the corner oracle at extended precision
        a = Box(0.15, 0.2, 0.1, 0.2)
        b = Box(0.8, 0.75, 0.2, 0.1)
        assert giou(a, b) == pytest.approx(-0.92857142857142857, abs=1e-14)
        assert giou(a, b) < 0.0

    def test_degenerate_same_point(self):
        z = Box(0.3, 0.3, 0.0, 0.0)
        assert giou(z, z) == 0.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=200, deadline=None)
    def test_bounds_symmetry_and_dominance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_box(rng), random_box(rng)
        i, g = iou(a, b), giou(a, b)
        assert 0.0 <= i <= 1.0
        assert -1.0 < g <= 1.0
        assert g <= i + 1e-12
        assert i == pytest.approx(iou(b, a), abs=1e-12)
        assert g == pytest.approx(giou(b, a), abs=1e-12)


class TestNeighborMask:
    def test_identical_boxes_all_true(self):
        boxes = [Box(0.5, 0.5, 0.2, 0.2)] * 4
        assert neighbor_mask(boxes).allowed.all()

    def test_disjoint_boxes_identity(self):
        boxes = [Box(0.1, 0.1, 0.1, 0.1), Box(0.5, 0.5, 0.1, 0.1), Box(0.9, 0.9, 0.1, 0.1)]
        np.testing.assert_array_equal(neighbor_mask(boxes).allowed, np.eye(3, dtype=bool))

    def test_chain_is_not_transitive(self):
        a = Box(0.2, 0.5, 0.2, 0.2)
        b = Box(0.35, 0.5, 0.2, 0.2)  # overlaps a and c
        c = Box(0.5, 0.5, 0.2, 0.2)
        m = neighbor_mask([a, b, c]).allowed
        assert m[0, 1] and m[1, 2]
        assert not m[0, 2] and not m[2, 0]
        assert m.diagonal().all()
        # oracle cross-check
        assert oracle_iou(a, b) > 0 and oracle_iou(b, c) > 0 and oracle_iou(a, c) == 0

    def test_zero_area_boxes_get_diagonal(self):
        m = neighbor_mask([Box(0.5, 0.5, 0.0, 0.0), Box(0.5, 0.5, 0.0, 0.0)])
        np.testing.assert_array_equal(m.allowed, np.eye(2, dtype=bool))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            neighbor_mask([])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_symmetric_true_diagonal(self, seed):
        rng = np.random.default_rng(seed)
        boxes = [random_box(rng) for _ in range(int(rng.integers(1, 10)))]
        m = neighbor_mask(boxes).allowed
        np.testing.assert_array_equal(m, m.T)
        assert m.diagonal().all()


def oracle_nms(dets, conf_thr, iou_thr):
    """Independent quadratic greedy suppression."""
    alive = [(i, d) for i, d in enumerate(dets) if d.score >= conf_thr]
    alive.sort(key=lambda t: (-t[1].score, t[0]))
    kept = []
    for _, d in alive:
        if any(k.class_id == d.class_id and oracle_iou(k.box, d.box) > iou_thr for k in kept):
            continue
        kept.append(d)
    return kept


def random_detections(rng, n, classes=2):
    return [
        Detection(box=random_box(rng), class_id=int(rng.integers(classes)),
                  score=float(rng.uniform()))
        for _ in range(n)
    ]


class TestNMS:
    def test_identical_boxes_keep_highest(self):
        b = Box(0.5, 0.5, 0.2, 0.2)
        dets = [Detection(b, 0, 0.8), Detection(b, 0, 0.9)]
        kept = nms(dets, 0.25, 0.6)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_confidence_filter(self):
        dets = [Detection(Box(0.5, 0.5, 0.2, 0.2), 0, 0.2)]
        assert nms(dets, 0.25, 0.6) == []

    def test_different_classes_not_suppressed(self):
        b = Box(0.5, 0.5, 0.2, 0.2)
        dets = [Detection(b, 0, 0.9), Detection(b, 1, 0.8)]
        assert len(nms(dets, 0.25, 0.6)) == 2

    def test_matches_oracle(self, rng):
        for _ in range(300):
            dets = random_detections(rng, int(rng.integers(0, 12)))
            conf = float(rng.uniform(0.0, 0.5))
            thr = float(rng.uniform(0.2, 0.9))
            ours = nms(dets, conf, thr)
            ref = oracle_nms(dets, conf, thr)
            assert [id(d) for d in ours] == [id(d) for d in ref]

    def test_output_properties(self, rng):
        dets = random_detections(rng, 30, classes=3)
        kept = nms(dets, 0.25, 0.6)
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) <= 0.6


class TestBoxConvert:
    def test_unit_box(self):
        assert box_to_corners(Box(0.5, 0.5, 1.0, 1.0)) == (0.0, 0.0, 1.0, 1.0)

    def test_round_trip(self, rng):
        for _ in range(200):
            b = random_box(rng)
            rb = corners_to_box(*box_to_corners(b))
            for field in ("cx", "cy", "w", "h"):
                assert getattr(rb, field) == pytest.approx(getattr(b, field), abs=1e-15)

    def test_corner_oracle_agrees_with_center_form(self, rng):
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == pytest.approx(oracle_iou(a, b), abs=1e-12)

    def test_invalid_box_rejected(self):
        with pytest.raises(ValueError):
            Box(0.5, 0.5, -0.1, 0.2)
        with pytest.raises(ValueError):
            Box(float("nan"), 0.5, 0.1, 0.2)


def test_pairwise_matrix_matches_scalar(rng):
    boxes = [random_box(rng) for _ in range(15)]
    arr = boxes_to_array(boxes)
    mat = pairwise_iou_matrix(arr, arr)
    for i in range(15):
        for j in range(15):
            assert mat[i, j] == pytest.approx(iou(boxes[i], boxes[j]), abs=1e-12)
