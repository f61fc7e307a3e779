"""Decoder assembly: query tables, per-layer branch composition, box
refinement, and the classification/regression outputs.

Topology strings use one letter per branch (s, n, b, d) joined by ``-``
for sequential stacking with per-branch residuals, or ``+`` for parallel
branches fused by the gate.  Overlap adjacency is recomputed from the
refined boxes before every layer.

Box refinement happens in inverse-sigmoid space and the decoded box
tensors chain differentiably from the learned box table through every
layer; sampling locations and neighbor masks read the detached values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (
    DeformableParams,
    FeaturePyramid,
    GateParams,
    GateWeights,
    MultiHeadParams,
    QuerySet,
    block_attention,
    deformable_attention,
    gated_fusion,
    init_deformable,
    init_gate,
    init_mha,
    neighbor_attention,
    self_attention,
)
from .errors import ShapeMismatchError
from .geometry import neighbor_mask
from .tensor import (
    Parameter,
    Tensor,
    add,
    gelu,
    inverse_sigmoid,
    layer_norm,
    linear,
    make_rng,
    sigmoid,
    uniform_init,
)

BRANCH_CODES = {"s": "self", "n": "neighbor", "b": "block", "d": "deformable"}
TOPOLOGY_CHOICES = ("s-d", "n-d", "b-d", "s+d", "b+d", "n+d", "n+b+d")


def parse_topology(text: str) -> tuple[str, tuple[str, ...]]:
    """'n+b+d' -> ('gated', ('neighbor', 'block', 'deformable'))."""
    s = text.replace(" ", "")
    if not s:
        raise ValueError("empty topology")
    if "+" in s and "-" in s:
        raise ValueError(f"topology {text!r} mixes stacked and gated separators")
    mode = "gated" if ("+" in s or ("-" not in s)) else "stacked"
    tokens = s.replace("+", "-").split("-")
    branches = []
    for tok in tokens:
        if tok not in BRANCH_CODES:
            raise ValueError(f"unknown branch code {tok!r} in topology {text!r}")
        name = BRANCH_CODES[tok]
        if name in branches:
            raise ValueError(f"branch {tok!r} repeated in topology {text!r}")
        branches.append(name)
    if "self" in branches and "neighbor" in branches:
        raise ValueError(
            "topologies mixing self and neighbor attention are not supported "
            "(they share a gate slot)"
        )
    return mode, tuple(branches)


@dataclass
class HeadConfig:
    num_layers: int = 4
    num_queries: int = 100
    embed_dim: int = 64
    num_heads: int = 4
    num_classes: int = 8
    topology: str = "n+b+d"
    pos_encoding: bool = True
    deformable_points: int = 4
    num_levels: int = 3
    ffn_hidden: int = 256

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.num_queries < 1:
            raise ValueError("need at least one query")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even for the positional encoding")
        parse_topology(self.topology)

    @property
    def mode(self) -> str:
        return parse_topology(self.topology)[0]

    @property
    def branches(self) -> tuple[str, ...]:
        return parse_topology(self.topology)[1]


@dataclass
class LayerNormParams:
    gamma: Parameter
    beta: Parameter

    def all(self):
        return [self.gamma, self.beta]


@dataclass
class FFNParams:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def all(self):
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class LayerParams:
    branches: dict
    branch_norms: dict
    gate: Optional[GateParams]
    fuse_norm: Optional[LayerNormParams]
    ffn: FFNParams
    ffn_norm: LayerNormParams
    refine: FFNParams  # 2-layer MLP, output layer zero-initialized

    def all(self) -> list[Parameter]:
        out: list[Parameter] = []
        for br in self.branches.values():
            out.extend(br.all())
        for ln in self.branch_norms.values():
            out.extend(ln.all())
        if self.gate is not None:
            out.extend(self.gate.all())
        if self.fuse_norm is not None:
            out.extend(self.fuse_norm.all())
        out.extend(self.ffn.all())
        out.extend(self.ffn_norm.all())
        out.extend(self.refine.all())
        return out


@dataclass
class LayerPrediction:
    logits: Tensor  # [N, C]
    boxes: Tensor  # [N, 4] decoded cxcywh
    gate: Optional[GateWeights] = None


@dataclass
class HeadOutput:
    layers: list[LayerPrediction]

    @property
    def final(self) -> LayerPrediction:
        return self.layers[-1]


def _init_layer_norm(prefix: str, d: int) -> LayerNormParams:
    return LayerNormParams(
        gamma=Parameter(f"{prefix}.gamma", np.ones(d)),
        beta=Parameter(f"{prefix}.beta", np.zeros(d)),
    )


def _init_ffn(rng, prefix: str, d: int, hidden: int) -> FFNParams:
    return FFNParams(
        w1=Parameter(f"{prefix}.w1", uniform_init(rng, (d, hidden), d)),
        b1=Parameter(f"{prefix}.b1", np.zeros(hidden)),
        w2=Parameter(f"{prefix}.w2", uniform_init(rng, (hidden, d), hidden)),
        b2=Parameter(f"{prefix}.b2", np.zeros(d)),
    )


def _init_refine(rng, prefix: str, d: int) -> FFNParams:
    return FFNParams(
        w1=Parameter(f"{prefix}.w1", uniform_init(rng, (d, d), d)),
        b1=Parameter(f"{prefix}.b1", np.zeros(d)),
        w2=Parameter(f"{prefix}.w2", np.zeros((d, 4))),
        b2=Parameter(f"{prefix}.b2", np.zeros(4)),
    )


class CSDNHead:
    """The full detection head, parameters included."""

    def __init__(self, config: HeadConfig, seed: int = 0):
        self.config = config
        self.mode, self.branch_names = parse_topology(config.topology)
        rng = make_rng(seed)
        n, d = config.num_queries, config.embed_dim

        self.query_embed = Parameter("query.embed", uniform_init(rng, (n, d), d))
        self.query_box = Parameter("query.box", self._initial_box_table(n))

        self.layers = [
            self._build_layer(rng, i, config) for i in range(config.num_layers)
        ]

        prior = 0.01  # initial class probability, keeps early focal loss small
        bias0 = -math.log((1.0 - prior) / prior)
        self.class_w = Parameter(
            "class.w", uniform_init(rng, (d, config.num_classes), d)
        )
        self.class_b = Parameter(
            "class.b", np.full(config.num_classes, bias0)
        )

    @staticmethod
    def _initial_box_table(n: int) -> np.ndarray:
        """Grid of box centers covering the unit square, fixed start size."""
        side = math.ceil(math.sqrt(n))
        coords = (np.arange(side) + 0.5) / side
        cx, cy = np.meshgrid(coords, coords)
        table = np.stack(
            [
                cx.reshape(-1)[:n],
                cy.reshape(-1)[:n],
                np.full(n, 0.15),
                np.full(n, 0.15),
            ],
            axis=1,
        )
        clipped = np.clip(table, 1e-6, 1.0 - 1e-6)
        return np.log(clipped) - np.log1p(-clipped)

    def _build_layer(self, rng, index: int, cfg: HeadConfig) -> LayerParams:
        d = cfg.embed_dim
        prefix = f"layer{index}"
        branches: dict = {}
        branch_norms: dict = {}
        for name in self.branch_names:
            if name == "deformable":
                branches[name] = init_deformable(
                    rng, d, cfg.num_heads, cfg.num_levels, cfg.deformable_points,
                    f"{prefix}.{name}",
                )
            else:
                branches[name] = init_mha(rng, d, f"{prefix}.{name}")
            if self.mode == "stacked":
                branch_norms[name] = _init_layer_norm(f"{prefix}.{name}.norm", d)
        gate = init_gate(d, f"{prefix}.gate") if self.mode == "gated" else None
        fuse_norm = (
            _init_layer_norm(f"{prefix}.fuse.norm", d) if self.mode == "gated" else None
        )
        return LayerParams(
            branches=branches,
            branch_norms=branch_norms,
            gate=gate,
            fuse_norm=fuse_norm,
            ffn=_init_ffn(rng, f"{prefix}.ffn", d, cfg.ffn_hidden),
            ffn_norm=_init_layer_norm(f"{prefix}.ffn.norm", d),
            refine=_init_refine(rng, f"{prefix}.refine", d),
        )

    def parameters(self) -> list[Parameter]:
        out = [self.query_embed, self.query_box]
        for lp in self.layers:
            out.extend(lp.all())
        out.extend([self.class_w, self.class_b])
        return out

    def parameter_count(self) -> int:
        return sum(p.value.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def init_queries(self) -> QuerySet:
        boxes_t = sigmoid(self.query_box.value)
        return QuerySet(
            embeddings=self.query_embed.value,
            boxes=boxes_t.data.copy(),
            boxes_tensor=boxes_t,
        )

    def _run_branch(self, name: str, queries: QuerySet, pyramid: FeaturePyramid,
                    lp: LayerParams, mask) -> Tensor:
        cfg = self.config
        if name == "block":
            return block_attention(
                queries, pyramid.f_top, lp.branches[name], cfg.num_heads,
                pos_encoding=cfg.pos_encoding,
            )
        if name == "neighbor":
            return neighbor_attention(queries, mask, lp.branches[name], cfg.num_heads)
        if name == "self":
            return self_attention(queries, lp.branches[name], cfg.num_heads)
        if name == "deformable":
            return deformable_attention(queries, pyramid, lp.branches[name], cfg.num_heads)
        raise ValueError(f"unknown branch {name!r}")

    def csdn_layer(
        self, queries: QuerySet, pyramid: FeaturePyramid, lp: LayerParams
    ) -> tuple[QuerySet, Optional[GateWeights]]:
        cfg = self.config
        mask = (
            neighbor_mask(queries.boxes) if "neighbor" in self.branch_names else None
        )
        gate_weights = None
        if self.mode == "gated":
            outputs = {
                name: self._run_branch(name, queries, pyramid, lp, mask)
                for name in self.branch_names
            }
            fused, gate_weights = gated_fusion(
                queries, outputs, lp.gate, self.branch_names
            )
            x = layer_norm(
                add(queries.embeddings, fused),
                lp.fuse_norm.gamma.value,
                lp.fuse_norm.beta.value,
            )
        else:
            x = queries.embeddings
            for name in self.branch_names:
                stage = QuerySet(
                    embeddings=x,
                    boxes=queries.boxes,
                    boxes_tensor=queries.boxes_tensor,
                )
                out = self._run_branch(name, stage, pyramid, lp, mask)
                ln = lp.branch_norms[name]
                x = layer_norm(add(x, out), ln.gamma.value, ln.beta.value)

        h = linear(x, lp.ffn.w1.value, lp.ffn.b1.value)
        h = linear(gelu(h), lp.ffn.w2.value, lp.ffn.b2.value)
        x = layer_norm(add(x, h), lp.ffn_norm.gamma.value, lp.ffn_norm.beta.value)

        hidden = gelu(linear(x, lp.refine.w1.value, lp.refine.b1.value))
        delta = linear(hidden, lp.refine.w2.value, lp.refine.b2.value)
        base = (
            queries.boxes_tensor
            if queries.boxes_tensor is not None
            else queries.boxes
        )
        new_boxes = sigmoid(add(inverse_sigmoid(base), delta))
        next_queries = QuerySet(
            embeddings=x, boxes=new_boxes.data.copy(), boxes_tensor=new_boxes
        )
        return next_queries, gate_weights

    def _classify(self, emb: Tensor) -> Tensor:
        return linear(emb, self.class_w.value, self.class_b.value)

    def forward(self, pyramid: FeaturePyramid) -> HeadOutput:
        cfg = self.config
        if len(pyramid.levels) != cfg.num_levels:
            raise ShapeMismatchError(
                f"head built for {cfg.num_levels} levels, pyramid has {len(pyramid.levels)}"
            )
        if pyramid.channels != cfg.embed_dim:
            raise ShapeMismatchError(
                f"pyramid channels {pyramid.channels} != embed_dim {cfg.embed_dim}"
            )
        queries = self.init_queries()
        preds: list[LayerPrediction] = []
        for lp in self.layers:
            queries, gate_weights = self.csdn_layer(queries, pyramid, lp)
            preds.append(
                LayerPrediction(
                    logits=self._classify(queries.embeddings),
                    boxes=queries.boxes_tensor,
                    gate=gate_weights,
                )
            )
        if not preds:
            preds.append(
                LayerPrediction(
                    logits=self._classify(queries.embeddings),
                    boxes=queries.boxes_tensor,
                )
            )
        return HeadOutput(layers=preds)
