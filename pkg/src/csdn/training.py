"""Training machinery: assignment, losses, optimizer, epoch loop.

Predictions are matched one-to-one to ground truths by an exact
minimum-cost assignment, recomputed per decoder layer (deep
supervision).  The loss combines a sigmoid focal term over all queries
with L1 and GIoU terms over matched pairs.  Optimization is Adam with
decoupled weight decay and a linear warmup into a constant rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    AssignmentInfeasibleError,
    TrainingDivergenceError,
)
from .geometry import center_to_corner_array, pairwise_iou_matrix
from .head import CSDNHead, HeadOutput
from .kernels import lsap_solve
from .tensor import Parameter, Tensor, backward, make_rng


@dataclass
class Assignment:
    """One-to-one pairing of predictions to ground truths.

    ``pairs`` is sorted by ground-truth index; every ground truth appears
    exactly once, every prediction at most once.
    """

    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int]


@dataclass
class MatchWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class LossBreakdown:
    total: float
    cls: float
    l1: float
    giou: float
    per_layer: list[dict]
    tensor: Optional[Tensor] = None


def hungarian_match(cost: np.ndarray) -> Assignment:
    """Exact minimum-cost assignment of each column (ground truth) to a
    distinct row (prediction).

    Requires rows >= columns and finite costs.  Among equal-cost optima
    the result is the lexicographically smallest vector of prediction
    indices ordered by ground truth.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n < m:
        raise AssignmentInfeasibleError(
            f"infeasible: {m} ground truths exceed {n} predictions"
        )
    if m == 0:
        return Assignment(pairs=[], unmatched_predictions=list(range(n)))
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    ct = np.ascontiguousarray(cost.T)  # [m, n], rows = ground truths
    col4row, row4col, u, v = lsap_solve(ct)
    assigned = col4row.copy()

    scale = 1.0 + float(np.abs(cost).max())
    tol = 1e-12 * scale
    reduced = ct - u[:, None] - v[None, :]
    off = reduced < tol
    for g in range(m):
        off[g, assigned[g]] = False
    if off.any():
        assigned = _lexmin_refine(ct, assigned, 1e-9 * scale)

    pairs = [(int(assigned[g]), g) for g in range(m)]
    used = set(assigned.tolist())
    unmatched = [i for i in range(n) if i not in used]
    return Assignment(pairs=pairs, unmatched_predictions=unmatched)


def _assignment_value(ct: np.ndarray) -> float:
    col4row, _, _, _ = lsap_solve(np.ascontiguousarray(ct))
    return float(ct[np.arange(ct.shape[0]), col4row].sum())


def _lexmin_refine(ct: np.ndarray, assigned: np.ndarray, tol: float) -> np.ndarray:
    """Pin, per ground truth in order, the smallest prediction index that
    still admits an optimal completion."""
    m, n = ct.shape
    best = float(ct[np.arange(m), assigned].sum())
    fixed: list[int] = []
    free_preds = list(range(n))
    for g in range(m):
        fixed_cost = sum(ct[gg, pp] for gg, pp in enumerate(fixed))
        rest_rows = np.arange(g + 1, m)
        for p in free_preds:
            candidate = fixed_cost + ct[g, p]
            if len(rest_rows):
                cols = [q for q in free_preds if q != p]
                sub = ct[np.ix_(rest_rows, cols)]
                candidate += _assignment_value(sub)
            if candidate <= best + tol:
                fixed.append(p)
                free_preds.remove(p)
                break
        else:
            raise RuntimeError("lexmin refinement failed to extend the assignment")
    return np.array(fixed, dtype=np.int64)


# ---------------------------------------------------------------------------
# Costs and losses
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(
        x >= 0.0,
        1.0 / (1.0 + np.exp(-np.abs(x))),
        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
    )


def match_cost(
    logits: np.ndarray,
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    weights: MatchWeights = MatchWeights(),
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> np.ndarray:
    """[N, M] matching cost: focal-style class cost + L1 + (1 - GIoU)."""
    n = logits.shape[0]
    m = gt_boxes.shape[0]
    if m == 0:
        return np.zeros((n, 0))
    p = _sigmoid(logits[:, gt_classes])  # [N, M]
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    pos = alpha * (1.0 - p) ** gamma * (-np.log(p))
    neg = (1.0 - alpha) * p**gamma * (-np.log(1.0 - p))
    cls_cost = pos - neg
    l1_cost = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    giou_cost = 1.0 - giou_matrix(boxes, gt_boxes)
    return weights.cls * cls_cost + weights.l1 * l1_cost + weights.giou * giou_cost


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU for center-form boxes, [N, 4] x [M, 4] -> [N, M]."""
    ca = center_to_corner_array(a)
    cb = center_to_corner_array(b)
    iou = pairwise_iou_matrix(a, b)
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(
        ca[:, None, 0], cb[None, :, 0]
    )
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(
        ca[:, None, 1], cb[None, :, 1]
    )
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    ew = np.maximum(ca[:, None, 2], cb[None, :, 2]) - np.minimum(
        ca[:, None, 0], cb[None, :, 0]
    )
    eh = np.maximum(ca[:, None, 3], cb[None, :, 3]) - np.minimum(
        ca[:, None, 1], cb[None, :, 1]
    )
    enc = ew * eh
    out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    penalty = np.where(enc > 0.0, (enc - union) / np.where(enc > 0.0, enc, 1.0), 0.0)
    return np.where(enc > 0.0, out - penalty, 0.0)


def focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    num_classes: int,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """Sigmoid focal loss over all queries, averaged by matched count.

    ``targets`` holds a class index per query, with ``num_classes``
    meaning background (an all-zero target row).
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    targets = np.asarray(targets, dtype=np.int64)
    n = targets.shape[0]
    onehot = np.zeros((n, num_classes))
    fg = targets < num_classes
    onehot[np.arange(n)[fg], targets[fg]] = 1.0
    matched = max(1, int(fg.sum()))
    return T.mul(
        T.sigmoid_focal(logits, onehot, alpha, gamma), 1.0 / matched
    )


def giou_pairs(pred_boxes: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Differentiable per-pair GIoU of matched center-form boxes [K, 4].

    Fused forward/backward; subgradient convention: clamp boundaries get
    zero, min/max ties split evenly.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64)
    p = pred_boxes.data if isinstance(pred_boxes, Tensor) else np.asarray(pred_boxes)
    px1 = p[:, 0] - p[:, 2] / 2.0
    px2 = p[:, 0] + p[:, 2] / 2.0
    py1 = p[:, 1] - p[:, 3] / 2.0
    py2 = p[:, 1] + p[:, 3] / 2.0
    gc = center_to_corner_array(gt)
    gx1, gy1, gx2, gy2 = gc[:, 0], gc[:, 1], gc[:, 2], gc[:, 3]

    s_ix1 = np.where(px1 > gx1, 1.0, np.where(px1 == gx1, 0.5, 0.0))
    s_ix2 = np.where(px2 < gx2, 1.0, np.where(px2 == gx2, 0.5, 0.0))
    s_iy1 = np.where(py1 > gy1, 1.0, np.where(py1 == gy1, 0.5, 0.0))
    s_iy2 = np.where(py2 < gy2, 1.0, np.where(py2 == gy2, 0.5, 0.0))
    s_ex1 = 1.0 - s_ix1
    s_ex2 = 1.0 - s_ix2
    s_ey1 = 1.0 - s_iy1
    s_ey2 = 1.0 - s_iy2

    iw_raw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih_raw = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    aw = (iw_raw > 0.0).astype(np.float64)
    ah = (ih_raw > 0.0).astype(np.float64)
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou = inter / union
    ew = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    eh = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    enc = ew * eh
    pen = (enc - union) / enc
    out_data = iou - pen

    def bw(out):
        def run():
            g = out.grad
            # d/d corners of inter, areaP, enclosing box
            di = {
                "px1": -ih * aw * s_ix1,
                "px2": ih * aw * s_ix2,
                "py1": -iw * ah * s_iy1,
                "py2": iw * ah * s_iy2,
            }
            da = {
                "px1": -(py2 - py1),
                "px2": (py2 - py1),
                "py1": -(px2 - px1),
                "py2": (px2 - px1),
            }
            de = {
                "px1": -eh * s_ex1,
                "px2": eh * s_ex2,
                "py1": -ew * s_ey1,
                "py2": ew * s_ey2,
            }
            grads = {}
            for key in di:
                d_inter = di[key]
                d_union = da[key] - d_inter
                d_iou = d_inter / union - iou * d_union / union
                d_pen = (de[key] - d_union) / enc - pen * de[key] / enc
                grads[key] = g * (d_iou - d_pen)
            gp = np.empty_like(p)
            gp[:, 0] = grads["px1"] + grads["px2"]
            gp[:, 1] = grads["py1"] + grads["py2"]
            gp[:, 2] = 0.5 * (grads["px2"] - grads["px1"])
            gp[:, 3] = 0.5 * (grads["py2"] - grads["py1"])
            T._accum(pred_boxes, gp)

        return run

    return T._make(out_data, (pred_boxes,), bw)


@dataclass
class DetectionLossConfig:
    match: MatchWeights = field(default_factory=MatchWeights)
    loss: LossWeights = field(default_factory=LossWeights)
    alpha: float = 0.25
    gamma: float = 2.0
    num_classes: int = 8


def layer_assignment(
    logits: np.ndarray,
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    cfg: DetectionLossConfig,
) -> Assignment:
    cost = match_cost(
        logits, boxes, gt_boxes, gt_classes, cfg.match, cfg.alpha, cfg.gamma
    )
    return hungarian_match(cost)


def detection_loss(
    output: HeadOutput,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    cfg: DetectionLossConfig,
    assignments: Optional[Sequence[Assignment]] = None,
) -> LossBreakdown:
    """Deep-supervised loss over every decoder layer.

    Matching is recomputed per layer unless ``assignments`` pins it
    (matching is not differentiable, so gradient checks freeze it).
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    total = None
    sums = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
    per_layer = []
    for li, layer in enumerate(output.layers):
        logits, boxes_t = layer.logits, layer.boxes
        n = logits.shape[0]
        if assignments is not None:
            assign = assignments[li]
        else:
            assign = layer_assignment(
                logits.data, boxes_t.data, gt_boxes, gt_classes, cfg
            )
        targets = np.full(n, cfg.num_classes, dtype=np.int64)
        for p, g in assign.pairs:
            targets[p] = gt_classes[g]
        cls_term = focal_loss(logits, targets, cfg.num_classes, cfg.alpha, cfg.gamma)

        if assign.pairs:
            pred_idx = np.array([p for p, _ in assign.pairs], dtype=np.int64)
            gt_idx = np.array([g for _, g in assign.pairs], dtype=np.int64)
            k = len(assign.pairs)
            matched_boxes = T.gather_rows(boxes_t, pred_idx)
            l1_term = T.mul(
                T.sum_op(T.abs_op(T.sub(matched_boxes, gt_boxes[gt_idx]))), 1.0 / k
            )
            giou_term = T.mul(
                T.sum_op(T.sub(1.0, giou_pairs(matched_boxes, gt_boxes[gt_idx]))),
                1.0 / k,
            )
        else:
            l1_term = Tensor(np.zeros(()))
            giou_term = Tensor(np.zeros(()))

        layer_total = T.add(
            T.add(T.mul(cls_term, cfg.loss.cls), T.mul(l1_term, cfg.loss.l1)),
            T.mul(giou_term, cfg.loss.giou),
        )
        total = layer_total if total is None else T.add(total, layer_total)
        rec = {
            "cls": float(cls_term.data),
            "l1": float(l1_term.data),
            "giou": float(giou_term.data),
            "total": float(layer_total.data),
        }
        per_layer.append(rec)
        for key in sums:
            sums[key] += rec[key]
    return LossBreakdown(
        total=float(total.data),
        cls=sums["cls"],
        l1=sums["l1"],
        giou=sums["giou"],
        per_layer=per_layer,
        tensor=total,
    )


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


def adamw_step(
    params: Sequence[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
):
    """One decoupled-weight-decay adaptive step; missing grads count as zero."""
    b1, b2 = betas
    for p in params:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(
                f"non-finite gradient in parameter {p.name!r}", parameter=p.name
            )
        p.step_count += 1
        t = p.step_count
        p.value.data -= lr * weight_decay * p.value.data
        m = p.first_moment.data
        v = p.second_moment.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.value.data -= lr * mhat / (np.sqrt(vhat) + eps)


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to base_lr, constant afterwards."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * (step + 1) / warmup_steps


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------


@dataclass
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    batch_size: int = 8
    epochs: int = 24


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: LossBreakdown
    eval_metrics: Optional[dict] = None


def train(
    head: CSDNHead,
    train_samples: Sequence,
    loss_cfg: DetectionLossConfig,
    optim: OptimConfig,
    seed: int,
    epochs: Optional[int] = None,
    evaluate_fn: Optional[Callable[[CSDNHead], dict]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    stop_fn: Optional[Callable[[EpochRecord], bool]] = None,
) -> list[EpochRecord]:
    """Run the optimization loop over (pyramid, gt_boxes, gt_classes) samples.

    Deterministic given the seed: data order, initialization, and all
    updates depend only on it.  Raises TrainingDivergenceError with the
    failing step index when the loss stops being finite.  ``stop_fn``
    may end the run after any epoch (early stopping).
    """
    epochs = optim.epochs if epochs is None else epochs
    params = head.parameters()
    rng = make_rng(seed)
    records: list[EpochRecord] = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_samples))
        epoch_loss = np.zeros(4)  # total, cls, l1, giou
        batches = 0
        for start in range(0, len(order), optim.batch_size):
            batch = order[start : start + optim.batch_size]
            head.zero_grad()
            batch_vals = np.zeros(4)
            for idx in batch:
                pyramid, gt_boxes, gt_classes = train_samples[int(idx)]
                try:
                    out = head.forward(pyramid)
                    lb = detection_loss(out, gt_boxes, gt_classes, loss_cfg)
                except ValueError as exc:
                    # non-finite activations surface first in the matcher
                    raise TrainingDivergenceError(
                        f"non-finite forward pass at step {step}: {exc}", step=step
                    ) from exc
                if not np.isfinite(lb.total):
                    raise TrainingDivergenceError(
                        f"non-finite loss at step {step}", step=step
                    )
                backward(lb.tensor, seed=np.asarray(1.0 / len(batch)))
                batch_vals += (lb.total, lb.cls, lb.l1, lb.giou)
            adamw_step(
                params,
                warmup_lr(optim.lr, step, optim.warmup_steps),
                (optim.beta1, optim.beta2),
                optim.eps,
                optim.weight_decay,
            )
            step += 1
            epoch_loss += batch_vals / len(batch)
            batches += 1
        mean = epoch_loss / max(1, batches)
        lb_mean = LossBreakdown(
            total=float(mean[0]), cls=float(mean[1]), l1=float(mean[2]),
            giou=float(mean[3]), per_layer=[],
        )
        metrics = evaluate_fn(head) if evaluate_fn is not None else None
        rec = EpochRecord(epoch=epoch, step=step, loss=lb_mean, eval_metrics=metrics)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if stop_fn is not None and stop_fn(rec):
            break
    return records
