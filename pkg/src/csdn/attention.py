"""Decoupled attention branches and their gated fusion.

Three branches produce per-query context vectors from different sources:

* block attention: cross-attention from queries to the coarsest pyramid
  level, a compact global scene summary;
* neighbor attention: self-attention between queries restricted to pairs
  whose boxes overlap (plain self-attention is the same code path with an
  all-true mask);
* deformable attention: per query, a small set of learned sampling
  points bilinearly interpolated from every pyramid level.

A linear gate on the pre-attention query embedding turns the active
branch outputs into a per-query convex combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeMismatchError
from .geometry import NeighborMask
from .tensor import (
    Parameter,
    Tensor,
    add,
    bilinear_gather,
    bmm,
    concat,
    linear,
    masked_softmax,
    mul,
    narrow,
    permute,
    reshape,
    softmax,
    sum_op,
    uniform_init,
)

GATE_COLUMNS = {"block": 0, "self": 1, "neighbor": 1, "deformable": 2}
NUM_GATE_COLUMNS = 3


@dataclass
class Level:
    """One feature map: [H, W, C] float64 values plus its stride."""

    data: np.ndarray
    stride: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"level data must be [H, W, C], got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def augmented(self) -> np.ndarray:
        """[H, W, C+1] map with a trailing ones channel, cached.

        Sampling this and projecting afterwards equals projecting the map
        and sampling it, including the zero-padded border (the ones
        channel carries the bias coverage)."""
        aug = getattr(self, "_aug", None)
        if aug is None:
            ones = np.ones((self.data.shape[0], self.data.shape[1], 1))
            aug = np.ascontiguousarray(np.concatenate([self.data, ones], axis=2))
            self._aug = aug
        return aug


@dataclass
class FeaturePyramid:
    """Ordered feature maps, finest first; the last level is the top."""

    levels: list[Level]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        chans = {lv.channels for lv in self.levels}
        if len(chans) != 1:
            raise ShapeMismatchError(f"levels disagree on channels: {sorted(chans)}")
        strides = [lv.stride for lv in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"strides must strictly increase, got {strides}")

    @property
    def f_top(self) -> Level:
        return self.levels[-1]

    @property
    def channels(self) -> int:
        return self.levels[0].channels


@dataclass
class QuerySet:
    """N object queries: an embedding row and a center-form box each.

    ``boxes`` holds plain values; sampling locations and neighbor masks
    read these detached floats.  ``boxes_tensor``, when present, is the
    same box values as a graph node so refinement chains differentiably
    across layers.
    """

    embeddings: Tensor
    boxes: np.ndarray
    boxes_tensor: Optional[Tensor] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        n = self.embeddings.shape[0]
        if n < 1 or self.boxes.shape != (n, 4):
            raise ShapeMismatchError(
                f"queries: embeddings {self.embeddings.shape} vs boxes {self.boxes.shape}"
            )

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class GateWeights:
    """Per-query branch weights, columns (block, neighbor/self, deformable)."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != NUM_GATE_COLUMNS:
            raise ShapeMismatchError(f"gate weights must be [N, 3], got {self.weights.shape}")


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class MultiHeadParams:
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter

    def all(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


@dataclass
class DeformableParams:
    num_points: int
    num_levels: int
    value_w: Parameter
    value_b: Parameter
    off_w: Parameter
    off_b: Parameter
    wgt_w: Parameter
    wgt_b: Parameter
    out_w: Parameter
    out_b: Parameter

    def all(self) -> list[Parameter]:
        return [
            self.value_w,
            self.value_b,
            self.off_w,
            self.off_b,
            self.wgt_w,
            self.wgt_b,
            self.out_w,
            self.out_b,
        ]


@dataclass
class GateParams:
    wg: Parameter
    bg: Parameter

    def all(self) -> list[Parameter]:
        return [self.wg, self.bg]


def init_mha(rng: np.random.Generator, d: int, prefix: str) -> MultiHeadParams:
    def w(name):
        return Parameter(f"{prefix}.{name}", uniform_init(rng, (d, d), d))

    def b(name):
        return Parameter(f"{prefix}.{name}", np.zeros(d))

    return MultiHeadParams(
        wq=w("wq"), bq=b("bq"), wk=w("wk"), bk=b("bk"),
        wv=w("wv"), bv=b("bv"), wo=w("wo"), bo=b("bo"),
    )


def init_deformable(
    rng: np.random.Generator,
    d: int,
    num_heads: int,
    num_levels: int,
    num_points: int,
    prefix: str,
) -> DeformableParams:
    """Offset weights start at zero with biases spread radially per head,
    so the initial sampling pattern covers the box; weight logits start
    uniform."""
    k = num_points
    off_dim = num_heads * num_levels * k * 2
    wgt_dim = num_heads * num_levels * k
    off_b = np.zeros((num_heads, num_levels, k, 2))
    for hh in range(num_heads):
        theta = 2.0 * math.pi * hh / num_heads
        direction = np.array([math.cos(theta), math.sin(theta)])
        for kk in range(k):
            off_b[hh, :, kk, :] = direction * 0.5 * (kk + 1) / k
    return DeformableParams(
        num_points=num_points,
        num_levels=num_levels,
        value_w=Parameter(f"{prefix}.value_w", uniform_init(rng, (d, d), d)),
        value_b=Parameter(f"{prefix}.value_b", np.zeros(d)),
        off_w=Parameter(f"{prefix}.off_w", np.zeros((d, off_dim))),
        off_b=Parameter(f"{prefix}.off_b", off_b.reshape(off_dim)),
        wgt_w=Parameter(f"{prefix}.wgt_w", np.zeros((d, wgt_dim))),
        wgt_b=Parameter(f"{prefix}.wgt_b", np.zeros(wgt_dim)),
        out_w=Parameter(f"{prefix}.out_w", uniform_init(rng, (d, d), d)),
        out_b=Parameter(f"{prefix}.out_b", np.zeros(d)),
    )


def init_gate(d: int, prefix: str) -> GateParams:
    """Zero init: every active branch starts with equal weight."""
    return GateParams(
        wg=Parameter(f"{prefix}.wg", np.zeros((d, NUM_GATE_COLUMNS))),
        bg=Parameter(f"{prefix}.bg", np.zeros(NUM_GATE_COLUMNS)),
    )


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------


def sinusoidal_encoding_2d(height: int, width: int, d: int) -> np.ndarray:
    """[H*W, d] sin/cos encoding of cell-center coordinates, y half then x half."""
    if d % 2 != 0:
        raise ValueError(f"positional encoding needs an even dim, got {d}")
    half = d // 2
    temperature = 10000.0
    freq = temperature ** (2.0 * (np.arange(half) // 2) / half)
    ys = (np.arange(height) + 0.5) / height * 2.0 * math.pi
    xs = (np.arange(width) + 0.5) / width * 2.0 * math.pi
    def enc(pos):
        ang = pos[:, None] / freq[None, :]
        out = np.empty_like(ang)
        out[:, 0::2] = np.sin(ang[:, 0::2])
        out[:, 1::2] = np.cos(ang[:, 1::2])
        return out
    ey = enc(ys)  # [H, half]
    ex = enc(xs)  # [W, half]
    grid = np.concatenate(
        [
            np.repeat(ey, width, axis=0),
            np.tile(ex, (height, 1)),
        ],
        axis=1,
    )
    return grid


# ---------------------------------------------------------------------------
# Branches
# ---------------------------------------------------------------------------


def multi_head_attention(
    q_in,
    k_in,
    v_in,
    params: MultiHeadParams,
    num_heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Standard h-head scaled dot-product attention; mask rows out logits
    before normalization."""
    d = params.wq.shape[0]
    if d % num_heads != 0:
        raise ShapeMismatchError(f"model dim {d} not divisible by {num_heads} heads")
    dk = d // num_heads
    scale = math.sqrt(dk)
    q = linear(q_in, params.wq.value, params.bq.value)
    k = linear(k_in, params.wk.value, params.bk.value)
    v = linear(v_in, params.wv.value, params.bv.value)
    n = q.shape[0]
    m = k.shape[0]
    q3 = permute(reshape(q, (n, num_heads, dk)), (1, 0, 2))  # [h, n, dk]
    k3 = permute(reshape(k, (m, num_heads, dk)), (1, 2, 0))  # [h, dk, m]
    v3 = permute(reshape(v, (m, num_heads, dk)), (1, 0, 2))  # [h, m, dk]
    logits = bmm(q3, k3)  # [h, n, m]
    if mask is None:
        att = softmax(logits, scale)
    else:
        att = masked_softmax(logits, mask, scale)  # mask broadcasts over heads
    out = reshape(permute(bmm(att, v3), (1, 0, 2)), (n, d))
    return linear(out, params.wo.value, params.bo.value)


def block_attention(
    queries: QuerySet,
    f_top: Level,
    params: MultiHeadParams,
    num_heads: int,
    pos_encoding: bool = True,
) -> Tensor:
    """Cross-attention from queries to the coarsest feature map."""
    if f_top.height == 0 or f_top.width == 0:
        raise ValueError("block_attention: empty feature map")
    flat = f_top.data.reshape(f_top.height * f_top.width, f_top.channels)
    if pos_encoding:
        key_in = flat + sinusoidal_encoding_2d(f_top.height, f_top.width, f_top.channels)
    else:
        key_in = flat
    return multi_head_attention(
        queries.embeddings, key_in, flat, params, num_heads, mask=None
    )


def neighbor_attention(
    queries: QuerySet,
    mask: NeighborMask,
    params: MultiHeadParams,
    num_heads: int,
) -> Tensor:
    """Self-attention restricted to overlapping queries."""
    n = queries.count
    if mask.n != n:
        raise ShapeMismatchError(f"mask for {mask.n} queries, got {n}")
    if not mask.allowed.diagonal().all():
        raise ValueError("neighbor mask must keep the diagonal true")
    emb = queries.embeddings
    return multi_head_attention(emb, emb, emb, params, num_heads, mask=mask.allowed)


def self_attention(queries: QuerySet, params: MultiHeadParams, num_heads: int) -> Tensor:
    """Unrestricted self-attention (the all-true-mask special case)."""
    n = queries.count
    mask = NeighborMask(n=n, allowed=np.ones((n, n), dtype=bool))
    return neighbor_attention(queries, mask, params, num_heads)


def deformable_attention(
    queries: QuerySet,
    pyramid: FeaturePyramid,
    params: DeformableParams,
    num_heads: int,
) -> Tensor:
    """Sample K learned points per head per level around each query box.

    Sampling locations are the box center plus predicted offsets scaled
    by half the box size; weights are softmax-normalized over levels x K
    per head.  Maps are sampled bilinearly with zero padding.
    """
    n = queries.count
    d = params.value_w.shape[0]
    if d % num_heads != 0:
        raise ShapeMismatchError(f"model dim {d} not divisible by {num_heads} heads")
    dv = d // num_heads
    nl = params.num_levels
    k = params.num_points
    if nl != len(pyramid.levels):
        raise ShapeMismatchError(
            f"deformable params built for {nl} levels, pyramid has {len(pyramid.levels)}"
        )
    emb = queries.embeddings

    # value projection applied after sampling: the maps are constants, so
    # sampling the raw features (plus a ones channel standing in for the
    # bias at zero-padded borders) commutes with the linear projection
    value_w_aug = concat(
        [params.value_w.value, reshape(params.value_b.value, (1, d))], axis=0
    )

    offsets = reshape(
        linear(emb, params.off_w.value, params.off_b.value), (n, num_heads, nl, k, 2)
    )
    logits = reshape(
        linear(emb, params.wgt_w.value, params.wgt_b.value), (n * num_heads, nl * k)
    )
    weights = reshape(softmax(logits, 1.0), (n, num_heads, nl, k))

    if queries.boxes_tensor is not None:
        bt = queries.boxes_tensor
        centers = reshape(narrow(bt, 1, 0, 2), (n, 1, 1, 1, 2))
        half_wh = reshape(mul(narrow(bt, 1, 2, 2), 0.5), (n, 1, 1, 1, 2))
    else:
        centers = queries.boxes[:, 0:2].reshape(n, 1, 1, 1, 2)
        half_wh = (queries.boxes[:, 2:4] / 2.0).reshape(n, 1, 1, 1, 2)
    locs_norm = add(mul(offsets, half_wh), centers)

    w3 = permute(reshape(value_w_aug, (d + 1, num_heads, dv)), (1, 0, 2))  # [h, d+1, dv]
    acc = None  # [h, n, dv], summed over levels
    for li, lv in enumerate(pyramid.levels):
        loc = reshape(narrow(locs_norm, 2, li, 1), (n * num_heads * k, 2))
        px = add(
            mul(loc, np.array([float(lv.width), float(lv.height)])),
            np.array([-0.5, -0.5]),
        )
        raw = bilinear_gather(lv.augmented(), px)  # [n*h*k, d+1]
        raw3 = reshape(
            permute(reshape(raw, (n, num_heads, k, d + 1)), (1, 0, 2, 3)),
            (num_heads, n * k, d + 1),
        )
        vals = reshape(bmm(raw3, w3), (num_heads, n, k, dv))
        w_l = reshape(
            permute(narrow(weights, 2, li, 1), (1, 0, 2, 3)), (num_heads, n, k, 1)
        )
        contrib = sum_op(mul(vals, w_l), axis=2)  # [h, n, dv]
        acc = contrib if acc is None else add(acc, contrib)
    out = reshape(permute(acc, (1, 0, 2)), (n, d))
    return linear(out, params.out_w.value, params.out_b.value)


# ---------------------------------------------------------------------------
# Gated fusion
# ---------------------------------------------------------------------------


def gated_fusion(
    queries: QuerySet,
    outputs: dict[str, Tensor],
    params: GateParams,
    active: Sequence[str],
    gate_override: Optional[np.ndarray] = None,
) -> tuple[Tensor, GateWeights]:
    """Convex per-query combination of the active branch outputs.

    The gate row is a softmax over the active columns of a linear map of
    the pre-attention query embedding.  Inactive columns report exactly
    zero weight.  ``gate_override`` (rows over active branches) replaces
    the learned gate, for inspection and tests.
    """
    active = list(active)
    if not active:
        raise ValueError("gated_fusion: active branch set is empty")
    for name in active:
        if name not in outputs:
            raise KeyError(f"gated_fusion: no output for branch {name!r}")
    n = queries.count

    if gate_override is not None:
        w_data = np.asarray(gate_override, dtype=np.float64)
        if w_data.shape != (n, len(active)):
            raise ShapeMismatchError(
                f"gate override {w_data.shape} != ({n}, {len(active)})"
            )
        w = Tensor(w_data)
    else:
        logits_full = linear(queries.embeddings, params.wg.value, params.bg.value)
        cols = [
            narrow(logits_full, 1, GATE_COLUMNS[name], 1) for name in active
        ]
        w = softmax(concat(cols, axis=1), 1.0)

    fused = None
    for a, name in enumerate(active):
        term = mul(outputs[name], narrow(w, 1, a, 1))
        fused = term if fused is None else add(fused, term)

    full = np.zeros((n, NUM_GATE_COLUMNS))
    for a, name in enumerate(active):
        full[:, GATE_COLUMNS[name]] = w.data[:, a]
    return fused, GateWeights(weights=full)
