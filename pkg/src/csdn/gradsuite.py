"""Gradient verification suite: every differentiable op plus the full
gated three-branch decoder layer, checked against central finite
differences on random small inputs.

Sampling keeps inputs away from non-differentiable points (integer
bilinear coordinates, clamp boundaries, min/max ties); the checked
quantity is smooth there and the finite-difference oracle is valid.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import FeaturePyramid, Level
from .head import CSDNHead, HeadConfig
from .tensor import Parameter, grad_check, make_rng
from .training import (
    DetectionLossConfig,
    detection_loss,
    giou_pairs,
    layer_assignment,
)

TOLERANCE = 1e-4


def _w(rng, shape):
    return rng.normal(size=shape)


def _check_matmul(rng):
    a = Parameter("a", _w(rng, (3, 4)))
    b = Parameter("b", _w(rng, (4, 2)))
    return lambda: T.sum_op(T.matmul(a.value, b.value)), [a, b]


def _check_linear(rng):
    x = Parameter("x", _w(rng, (2, 3)))
    w = Parameter("w", _w(rng, (3, 4)))
    b = Parameter("b", _w(rng, (4,)))
    c = _w(rng, (2, 4))
    return lambda: T.sum_op(T.mul(T.linear(x.value, w.value, b.value), c)), [x, w, b]


def _check_masked_softmax(rng):
    logits = Parameter("l", _w(rng, (4, 5)))
    mask = rng.uniform(size=(4, 5)) > 0.4
    mask[:, 0] = True
    c = _w(rng, (4, 5))
    scale = float(rng.uniform(0.5, 3.0))
    return (
        lambda: T.sum_op(T.mul(T.masked_softmax(logits.value, mask, scale), c)),
        [logits],
    )


def _check_layer_norm(rng):
    x = Parameter("x", _w(rng, (3, 6)))
    g = Parameter("g", 1.0 + 0.3 * _w(rng, (6,)))
    b = Parameter("b", 0.3 * _w(rng, (6,)))
    c = _w(rng, (3, 6))
    return (
        lambda: T.sum_op(T.mul(T.layer_norm(x.value, g.value, b.value), c)),
        [x, g, b],
    )


def _check_bilinear(rng):
    vmap = Parameter("m", _w(rng, (5, 6, 3)))
    locs = Parameter("p", rng.uniform(0.0, 4.0, size=(6, 2)) + 0.21)
    c = _w(rng, (6, 3))
    return (
        lambda: T.sum_op(T.mul(T.bilinear_gather(vmap.value, locs.value), c)),
        [vmap, locs],
    )


def _check_focal(rng):
    logits = Parameter("l", _w(rng, (5, 3)))
    onehot = np.zeros((5, 3))
    onehot[rng.integers(0, 5), rng.integers(0, 3)] = 1.0
    alpha = float(rng.uniform(0.1, 0.9))
    gamma = float(rng.uniform(0.0, 3.0))
    return lambda: T.sigmoid_focal(logits.value, onehot, alpha, gamma), [logits]


def _check_giou(rng):
    pred = Parameter("p", np.c_[
        rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.15, 0.4, (5, 2))
    ])
    gt = np.c_[rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.15, 0.4, (5, 2))]
    return lambda: T.sum_op(giou_pairs(pred.value, gt)), [pred]


def _check_sigmoid_chain(rng):
    x = Parameter("x", _w(rng, (4, 3)))
    c = _w(rng, (4, 3))
    return (
        lambda: T.sum_op(T.mul(T.inverse_sigmoid(T.sigmoid(x.value)), c)),
        [x],
    )


def _check_gelu_ffn(rng):
    x = Parameter("x", _w(rng, (3, 4)))
    w1 = Parameter("w1", _w(rng, (4, 8)))
    b1 = Parameter("b1", _w(rng, (8,)))
    w2 = Parameter("w2", _w(rng, (8, 4)))
    b2 = Parameter("b2", _w(rng, (4,)))
    c = _w(rng, (3, 4))
    return (
        lambda: T.sum_op(
            T.mul(
                T.linear(T.gelu(T.linear(x.value, w1.value, b1.value)), w2.value, b2.value),
                c,
            )
        ),
        [x, w1, b1, w2, b2],
    )


def _check_bmm_permute(rng):
    a = Parameter("a", _w(rng, (2, 3, 4)))
    b = Parameter("b", _w(rng, (2, 4, 5)))
    c = _w(rng, (3, 2, 5))
    return (
        lambda: T.sum_op(T.mul(T.permute(T.bmm(a.value, b.value), (1, 0, 2)), c)),
        [a, b],
    )


def _check_structural(rng):
    x = Parameter("x", _w(rng, (6, 4)))
    idx = rng.integers(0, 6, size=5)
    c = _w(rng, (5, 2))
    def f():
        g = T.gather_rows(x.value, idx)
        left = T.narrow(g, 1, 0, 2)
        right = T.narrow(g, 1, 2, 2)
        return T.sum_op(T.mul(T.concat([left], axis=1), c)) + T.sum_op(
            T.abs_op(right)
        )
    return f, [x]


def _check_elementwise(rng):
    x = Parameter("x", 0.5 + np.abs(_w(rng, (4, 3))))
    y = Parameter("y", 0.5 + np.abs(_w(rng, (4, 3))))
    def f():
        a = T.div(T.mul(x.value, y.value), T.add(x.value, y.value))
        b = T.maximum(x.value, T.mul(y.value, 1.01))
        cexp = T.exp(T.mul(T.log(x.value), 0.5))
        return T.sum_op(a) + T.sum_op(b) + T.sum_op(cexp) + T.mean_op(
            T.pow_const(x.value, 1.5)
        )
    return f, [x, y]


def _check_full_layer(rng):
    cfg = HeadConfig(
        num_layers=1, num_queries=3, embed_dim=4, num_heads=2, num_classes=2,
        topology="n+b+d", deformable_points=2, num_levels=2, ffn_hidden=8,
    )
    head = CSDNHead(cfg, seed=int(rng.integers(0, 2**31)))
    head.query_box.value.data += rng.uniform(0.03, 0.12, size=(3, 4))
    pyramid = FeaturePyramid(levels=[
        Level(data=rng.normal(size=(3, 3, 4)), stride=8),
        Level(data=rng.normal(size=(2, 2, 4)), stride=16),
    ])
    gt_boxes = np.array([[0.35, 0.4, 0.2, 0.25], [0.7, 0.6, 0.22, 0.2]])
    gt_classes = np.array([0, 1])
    loss_cfg = DetectionLossConfig(num_classes=2)
    out0 = head.forward(pyramid)
    frozen = [
        layer_assignment(l.logits.data, l.boxes.data, gt_boxes, gt_classes, loss_cfg)
        for l in out0.layers
    ]
    def f():
        out = head.forward(pyramid)
        return detection_loss(out, gt_boxes, gt_classes, loss_cfg, assignments=frozen).tensor
    return f, head.parameters()


OP_CHECKS = [
    ("matmul", _check_matmul),
    ("linear", _check_linear),
    ("masked_softmax", _check_masked_softmax),
    ("layer_norm", _check_layer_norm),
    ("bilinear_gather", _check_bilinear),
    ("sigmoid_focal", _check_focal),
    ("giou_pairs", _check_giou),
    ("sigmoid/inverse_sigmoid", _check_sigmoid_chain),
    ("gelu_ffn", _check_gelu_ffn),
    ("bmm/permute", _check_bmm_permute),
    ("structural", _check_structural),
    ("elementwise", _check_elementwise),
]


def run_gradient_suite(
    num_seeds: int = 50,
    epsilon: float = 1e-5,
    include_layer: bool = True,
    base_seed: int = 1000,
) -> dict[str, float]:
    """Max relative error per check over all seeds."""
    worst: dict[str, float] = {name: 0.0 for name, _ in OP_CHECKS}
    if include_layer:
        worst["full_layer_n+b+d"] = 0.0
    for s in range(num_seeds):
        rng = make_rng(base_seed + s)
        for name, builder in OP_CHECKS:
            f, params = builder(rng)
            err = grad_check(f, params, epsilon)
            worst[name] = max(worst[name], err)
        if include_layer:
            f, params = _check_full_layer(rng)
            err = grad_check(f, params, epsilon)
            worst["full_layer_n+b+d"] = max(worst["full_layer_n+b+d"], err)
    return worst
