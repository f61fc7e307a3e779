"""Attention branches against straight-line reference evaluations."""

import math

import numpy as np
import pytest

from csdn import tensor as T
from csdn.attention import (
    FeaturePyramid,
    GateParams,
    Level,
    QuerySet,
    block_attention,
    deformable_attention,
    gated_fusion,
    init_deformable,
    init_gate,
    init_mha,
    neighbor_attention,
    self_attention,
    sinusoidal_encoding_2d,
)
from csdn.geometry import Box, NeighborMask, boxes_to_array, neighbor_mask
from csdn.tensor import Parameter, Tensor, grad_check, make_rng


def make_queries(rng, n, d, spread=True):
    emb = Tensor(rng.normal(size=(n, d)))
    if spread:
        cx = rng.uniform(0.2, 0.8, size=n)
        cy = rng.uniform(0.2, 0.8, size=n)
        wh = rng.uniform(0.15, 0.3, size=(n, 2))
        boxes = np.c_[cx, cy, wh]
    else:
        boxes = np.tile([0.5, 0.5, 0.3, 0.3], (n, 1))
    return QuerySet(embeddings=emb, boxes=boxes)


def reference_attention(q, k, v, mask, params, num_heads):
    """Per-query, per-head python-loop evaluation of masked attention."""
    d = q.shape[1]
    dk = d // num_heads
    qp = q @ params.wq.value.data + params.bq.value.data
    kp = k @ params.wk.value.data + params.bk.value.data
    vp = v @ params.wv.value.data + params.bv.value.data
    out = np.zeros((q.shape[0], d))
    for hh in range(num_heads):
        sl = slice(hh * dk, (hh + 1) * dk)
        for i in range(q.shape[0]):
            logits = []
            idx = []
            for j in range(k.shape[0]):
                if mask is None or mask[i, j]:
                    logits.append(qp[i, sl] @ kp[j, sl] / math.sqrt(dk))
                    idx.append(j)
            logits = np.array(logits)
            e = np.exp(logits - logits.max())
            w = e / e.sum()
            for wj, j in zip(w, idx):
                out[i, sl] += wj * vp[j, sl]
    return out @ params.wo.value.data + params.bo.value.data


class TestBlockAttention:
    def test_single_location_map(self, rng):
        d = 8
        queries = make_queries(rng, 3, d)
        f_top = Level(data=rng.normal(size=(1, 1, d)), stride=32)
        params = init_mha(make_rng(0), d, "t")
        out = block_attention(queries, f_top, params, 2, pos_encoding=False)
        loc = f_top.data.reshape(1, d)
        expected = (loc @ params.wv.value.data + params.bv.value.data) @ \
            params.wo.value.data + params.bo.value.data
        np.testing.assert_allclose(out.data, np.tile(expected, (3, 1)), rtol=1e-12)

    def test_identical_locations_make_queries_irrelevant(self, rng):
        d = 8
        q1 = make_queries(rng, 4, d)
        q2 = make_queries(rng, 4, d)
        row = rng.normal(size=(1, 1, d))
        f_top = Level(data=np.tile(row, (3, 3, 1)), stride=32)
        params = init_mha(make_rng(1), d, "t")
        out1 = block_attention(q1, f_top, params, 2, pos_encoding=False)
        out2 = block_attention(q2, f_top, params, 2, pos_encoding=False)
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)

    def test_matches_reference_loop(self, rng):
        d = 8
        queries = make_queries(rng, 2, d)
        f_top = Level(data=rng.normal(size=(2, 2, d)), stride=32)
        params = init_mha(make_rng(2), d, "t")
        out = block_attention(queries, f_top, params, 1, pos_encoding=False)
        flat = f_top.data.reshape(4, d)
        ref = reference_attention(queries.embeddings.data, flat, flat, None, params, 1)
        np.testing.assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)

    def test_spatial_permutation_invariance_without_pe(self, rng):
        d = 8
        queries = make_queries(rng, 3, d)
        fmap = rng.normal(size=(2, 3, d))
        params = init_mha(make_rng(3), d, "t")
        out = block_attention(queries, Level(fmap, 32), params, 2, pos_encoding=False)
        perm = rng.permutation(6)
        shuffled = fmap.reshape(6, d)[perm].reshape(2, 3, d)
        out_p = block_attention(queries, Level(shuffled, 32), params, 2, pos_encoding=False)
        np.testing.assert_allclose(out.data, out_p.data, atol=1e-12)

    def test_pe_breaks_permutation_invariance(self, rng):
        d = 8
        queries = make_queries(rng, 3, d)
        fmap = rng.normal(size=(2, 3, d))
        params = init_mha(make_rng(3), d, "t")
        out = block_attention(queries, Level(fmap, 32), params, 2, pos_encoding=True)
        perm = np.roll(np.arange(6), 1)
        shuffled = fmap.reshape(6, d)[perm].reshape(2, 3, d)
        out_p = block_attention(queries, Level(shuffled, 32), params, 2, pos_encoding=True)
        assert np.abs(out.data - out_p.data).max() > 1e-6

    def test_empty_map_rejected(self, rng):
        queries = make_queries(rng, 2, 8)
        params = init_mha(make_rng(0), 8, "t")
        with pytest.raises(ValueError):
            block_attention(queries, Level(np.zeros((0, 2, 8)), 32), params, 2)


class TestNeighborAttention:
    def test_all_true_mask_equals_plain_self_attention(self, rng):
        d = 16
        queries = make_queries(rng, 6, d)
        params = init_mha(make_rng(4), d, "t")
        mask = NeighborMask(n=6, allowed=np.ones((6, 6), dtype=bool))
        out_masked = neighbor_attention(queries, mask, params, 4)
        emb = queries.embeddings.data
        ref = reference_attention(emb, emb, emb, None, params, 4)
        np.testing.assert_allclose(out_masked.data, ref, atol=1e-12)

    def test_identity_mask_gives_own_value_projection(self, rng):
        d = 8
        queries = make_queries(rng, 4, d)
        params = init_mha(make_rng(5), d, "t")
        mask = NeighborMask(n=4, allowed=np.eye(4, dtype=bool))
        out = neighbor_attention(queries, mask, params, 2)
        vp = queries.embeddings.data @ params.wv.value.data + params.bv.value.data
        expected = vp @ params.wo.value.data + params.bo.value.data
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_chain_adjacency_matches_reference(self, rng):
        d = 8
        boxes = [Box(0.2, 0.5, 0.2, 0.2), Box(0.35, 0.5, 0.2, 0.2),
                 Box(0.5, 0.5, 0.2, 0.2), Box(0.9, 0.9, 0.1, 0.1)]
        queries = QuerySet(
            embeddings=Tensor(rng.normal(size=(4, d))), boxes=boxes_to_array(boxes)
        )
        mask = neighbor_mask(boxes)
        params = init_mha(make_rng(6), d, "t")
        out = neighbor_attention(queries, mask, params, 2)
        emb = queries.embeddings.data
        ref = reference_attention(emb, emb, emb, mask.allowed, params, 2)
        np.testing.assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)

    def test_mask_diagonal_required(self, rng):
        queries = make_queries(rng, 3, 8)
        params = init_mha(make_rng(0), 8, "t")
        bad = NeighborMask(n=3, allowed=np.zeros((3, 3), dtype=bool))
        with pytest.raises(ValueError):
            neighbor_attention(queries, bad, params, 2)


class TestDeformableAttention:
    def _pyramid(self, rng, d, sizes=((4, 4), (2, 2))):
        return FeaturePyramid(levels=[
            Level(data=rng.normal(size=(h, w, d)), stride=2 ** (5 + i))
            for i, (h, w) in enumerate(sizes)
        ])

    def test_zero_offsets_on_grid_point(self, rng):
        d = 8
        params = init_deformable(make_rng(7), d, 2, 1, 2, "t")
        params.off_b.value.data[:] = 0.0  # all sampling at the box center
        fmap = rng.normal(size=(4, 4, d))
        pyramid = FeaturePyramid(levels=[Level(fmap, 32)])
        # center (x=2.5/4, y=1.5/4) lands exactly on grid point (col 2, row 1)
        boxes = np.array([[2.5 / 4.0, 1.5 / 4.0, 0.2, 0.2]])
        queries = QuerySet(embeddings=Tensor(rng.normal(size=(1, d))), boxes=boxes)
        out = deformable_attention(queries, pyramid, params, 2)
        cell = fmap[1, 2]
        expected = (cell @ params.value_w.value.data + params.value_b.value.data) @ \
            params.out_w.value.data + params.out_b.value.data
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-10, atol=1e-12)

    def test_constant_map_ignores_offsets(self, rng):
        d = 8
        row = rng.normal(size=d)
        pyramid = FeaturePyramid(levels=[Level(np.tile(row, (5, 5, 1)), 32)])
        queries = make_queries(rng, 3, d)
        p1 = init_deformable(make_rng(8), d, 2, 1, 3, "t")
        p2 = init_deformable(make_rng(8), d, 2, 1, 3, "t")
        p2.off_b.value.data[:] = rng.uniform(-0.3, 0.3, p2.off_b.value.data.shape)
        p2.wgt_b.value.data[:] = rng.normal(size=p2.wgt_b.value.data.shape)
        out1 = deformable_attention(queries, pyramid, p1, 2)
        out2 = deformable_attention(queries, pyramid, p2, 2)
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)

    def test_matches_reference_loop(self, rng):
        d = 4
        num_heads = 1
        k = 2
        params = init_deformable(make_rng(9), d, num_heads, 1, k, "t")
        params.off_w.value.data[:] = rng.normal(size=params.off_w.value.data.shape) * 0.1
        params.wgt_w.value.data[:] = rng.normal(size=params.wgt_w.value.data.shape) * 0.1
        fmap = rng.normal(size=(3, 3, d))
        pyramid = FeaturePyramid(levels=[Level(fmap, 32)])
        queries = make_queries(rng, 1, d)
        out = deformable_attention(queries, pyramid, params, num_heads)

        # reference: explicit bilinear formula, project-then-sample order
        emb = queries.embeddings.data[0]
        cx, cy, w, h = queries.boxes[0]
        offs = (emb @ params.off_w.value.data + params.off_b.value.data).reshape(k, 2)
        logits = emb @ params.wgt_w.value.data + params.wgt_b.value.data
        e = np.exp(logits - logits.max())
        wgt = e / e.sum()
        vmap = fmap.reshape(9, d) @ params.value_w.value.data + params.value_b.value.data
        vmap = vmap.reshape(3, 3, d)

        def bilin(m, x, y):
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - x0, y - y0
            tot = np.zeros(m.shape[2])
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= yy < m.shape[0] and 0 <= xx < m.shape[1]:
                        tot += wy * wx * m[yy, xx]
            return tot

        agg = np.zeros(d)
        for kk in range(k):
            x_norm = cx + offs[kk, 0] * w / 2.0
            y_norm = cy + offs[kk, 1] * h / 2.0
            agg += wgt[kk] * bilin(vmap, x_norm * 3 - 0.5, y_norm * 3 - 0.5)
        expected = agg @ params.out_w.value.data + params.out_b.value.data
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-9, atol=1e-11)

    def test_weights_simplex_per_query_head(self, rng):
        d = 8
        params = init_deformable(make_rng(10), d, 2, 2, 3, "t")
        params.wgt_w.value.data[:] = rng.normal(size=params.wgt_w.value.data.shape)
        queries = make_queries(rng, 4, d)
        emb = queries.embeddings.data
        logits = (emb @ params.wgt_w.value.data + params.wgt_b.value.data).reshape(4, 2, 2, 3)
        e = np.exp(logits - logits.max(axis=(2, 3), keepdims=True))
        wgt = e / e.sum(axis=(2, 3), keepdims=True)
        assert (wgt >= 0).all()
        np.testing.assert_allclose(wgt.sum(axis=(2, 3)), 1.0, atol=1e-12)

    def test_gradients(self, rng):
        d = 4
        params = init_deformable(make_rng(11), d, 2, 2, 2, "t")
        pyramid = self._pyramid(rng, d, sizes=((3, 3), (2, 2)))
        queries = make_queries(rng, 2, d)
        c = rng.normal(size=(2, d))
        err = grad_check(
            lambda: T.sum_op(T.mul(deformable_attention(queries, pyramid, params, 2), c)),
            params.all(),
            1e-5,
        )
        assert err < 1e-4


class TestGatedFusion:
    def test_single_branch_exact(self, rng):
        d = 8
        queries = make_queries(rng, 3, d)
        out = Tensor(rng.normal(size=(3, d)))
        gate = init_gate(d, "g")
        fused, gw = gated_fusion(queries, {"deformable": out}, gate, ["deformable"])
        assert np.array_equal(fused.data, out.data)
        np.testing.assert_array_equal(gw.weights[:, 2], 1.0)
        np.testing.assert_array_equal(gw.weights[:, :2], 0.0)

    def test_zero_init_gate_means_equal_weights(self, rng):
        d = 8
        queries = make_queries(rng, 4, d)
        a, b = Tensor(rng.normal(size=(4, d))), Tensor(rng.normal(size=(4, d)))
        gate = init_gate(d, "g")
        fused, gw = gated_fusion(queries, {"block": a, "deformable": b}, gate,
                                 ["block", "deformable"])
        np.testing.assert_allclose(fused.data, (a.data + b.data) / 2.0, rtol=1e-12)
        np.testing.assert_allclose(gw.weights[:, 0], 0.5, atol=1e-15)

    def test_three_branch_scalar_loop_reference(self, rng):
        d = 8
        queries = make_queries(rng, 5, d)
        outs = {name: Tensor(rng.normal(size=(5, d)))
                for name in ("block", "neighbor", "deformable")}
        gate = init_gate(d, "g")
        gate.wg.value.data[:] = rng.normal(size=(d, 3))
        gate.bg.value.data[:] = rng.normal(size=3)
        active = ["block", "neighbor", "deformable"]
        fused, gw = gated_fusion(queries, outs, gate, active)
        for i in range(5):
            row = np.zeros(d)
            for name in active:
                row += gw.weights[i][{"block": 0, "neighbor": 1, "deformable": 2}[name]] \
                    * outs[name].data[i]
            np.testing.assert_allclose(fused.data[i], row, rtol=1e-10, atol=1e-12)

    def test_one_hot_override_reproduces_branch(self, rng):
        d = 8
        queries = make_queries(rng, 4, d)
        outs = {name: Tensor(rng.normal(size=(4, d)))
                for name in ("block", "neighbor", "deformable")}
        gate = init_gate(d, "g")
        onehot = np.zeros((4, 3))
        onehot[:, 1] = 1.0
        fused, _ = gated_fusion(queries, outs, gate, ["block", "neighbor", "deformable"],
                                gate_override=onehot)
        assert np.array_equal(fused.data, outs["neighbor"].data)

    def test_rows_form_simplex_inactive_zero(self, rng):
        d = 8
        queries = make_queries(rng, 6, d)
        outs = {"neighbor": Tensor(rng.normal(size=(6, d))),
                "deformable": Tensor(rng.normal(size=(6, d)))}
        gate = init_gate(d, "g")
        gate.wg.value.data[:] = rng.normal(size=(d, 3))
        _, gw = gated_fusion(queries, outs, gate, ["neighbor", "deformable"])
        assert (gw.weights >= 0).all()
        np.testing.assert_allclose(gw.weights.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(gw.weights[:, 0], 0.0)  # block inactive

    def test_empty_active_rejected(self, rng):
        queries = make_queries(rng, 2, 8)
        with pytest.raises(ValueError):
            gated_fusion(queries, {}, init_gate(8, "g"), [])

    def test_gate_gradients(self, rng):
        d = 8
        queries = make_queries(rng, 3, d)
        outs = {"block": Tensor(rng.normal(size=(3, d))),
                "deformable": Tensor(rng.normal(size=(3, d)))}
        gate = init_gate(d, "g")
        gate.wg.value.data[:] = rng.normal(size=(d, 3)) * 0.3
        c = rng.normal(size=(3, d))
        err = grad_check(
            lambda: T.sum_op(T.mul(
                gated_fusion(queries, outs, gate, ["block", "deformable"])[0], c)),
            gate.all(), 1e-5)
        assert err < 1e-5


class TestPositionalEncoding:
    def test_shape_and_range(self):
        pe = sinusoidal_encoding_2d(4, 6, 16)
        assert pe.shape == (24, 16)
        assert (np.abs(pe) <= 1.0 + 1e-12).all()

    def test_distinct_positions_distinct_codes(self):
        pe = sinusoidal_encoding_2d(5, 5, 32)
        dists = np.linalg.norm(pe[:, None, :] - pe[None, :, :], axis=2)
        np.fill_diagonal(dists, 1.0)
        assert dists.min() > 1e-6

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_encoding_2d(2, 2, 7)


class TestBranchGradients:
    def test_block_and_neighbor_gradients(self, rng):
        d = 8
        queries = make_queries(rng, 4, d)
        f_top = Level(data=rng.normal(size=(3, 3, d)), stride=32)
        mask = neighbor_mask(queries.boxes)
        for name, fn, params in [
            ("block", lambda p: block_attention(queries, f_top, p, 2), init_mha(make_rng(12), d, "b")),
            ("neighbor", lambda p: neighbor_attention(queries, mask, p, 2), init_mha(make_rng(13), d, "n")),
            ("self", lambda p: self_attention(queries, p, 2), init_mha(make_rng(14), d, "s")),
        ]:
            c = rng.normal(size=(4, d))
            err = grad_check(lambda: T.sum_op(T.mul(fn(params), c)), params.all(), 1e-5)
            assert err < 1e-4, name
