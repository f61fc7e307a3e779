"""Decoder assembly: topology parsing, refinement, determinism,
equivariance, parameter accounting."""

import numpy as np
import pytest

from csdn.attention import FeaturePyramid, Level
from csdn.head import CSDNHead, HeadConfig, parse_topology
from csdn.tensor import make_rng, no_grad


def toy_config(**kw):
    base = dict(
        num_layers=2, num_queries=6, embed_dim=8, num_heads=2, num_classes=3,
        topology="n+b+d", deformable_points=2, num_levels=2, ffn_hidden=16,
    )
    base.update(kw)
    return HeadConfig(**base)


def toy_pyramid(rng, d=8, sizes=((4, 4), (2, 2))):
    return FeaturePyramid(levels=[
        Level(data=rng.normal(size=(h, w, d)), stride=2 ** (3 + i))
        for i, (h, w) in enumerate(sizes)
    ])


class TestTopologyParsing:
    @pytest.mark.parametrize("text,mode,branches", [
        ("s-d", "stacked", ("self", "deformable")),
        ("n-d", "stacked", ("neighbor", "deformable")),
        ("b-d", "stacked", ("block", "deformable")),
        ("s+d", "gated", ("self", "deformable")),
        ("b+d", "gated", ("block", "deformable")),
        ("n+d", "gated", ("neighbor", "deformable")),
        ("n+b+d", "gated", ("neighbor", "block", "deformable")),
        ("d", "gated", ("deformable",)),
        ("n + b + d", "gated", ("neighbor", "block", "deformable")),
    ])
    def test_valid(self, text, mode, branches):
        assert parse_topology(text) == (mode, branches)

    @pytest.mark.parametrize("text", ["", "x-d", "s+n", "s-n-d", "s+d-b", "d+d"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            parse_topology(text)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            toy_config(embed_dim=9)
        with pytest.raises(ValueError):
            toy_config(num_layers=-1)
        with pytest.raises(ValueError):
            toy_config(topology="q+d")


class TestInitQueries:
    def test_deterministic_construction(self):
        a = CSDNHead(toy_config(), seed=7)
        b = CSDNHead(toy_config(), seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.value.data, pb.value.data)

    def test_single_query_works(self, rng):
        head = CSDNHead(toy_config(num_queries=1), seed=0)
        out = head.forward(toy_pyramid(rng))
        assert out.final.logits.shape == (1, 3)
        assert out.final.boxes.shape == (1, 4)

    def test_boxes_decode_into_unit_square(self):
        head = CSDNHead(toy_config(num_queries=5), seed=0)
        qs = head.init_queries()
        assert (qs.boxes >= 0.0).all() and (qs.boxes <= 1.0).all()

    def test_different_seeds_differ(self):
        a = CSDNHead(toy_config(), seed=0)
        b = CSDNHead(toy_config(), seed=1)
        assert not np.array_equal(a.query_embed.value.data, b.query_embed.value.data)


class TestCSDNLayer:
    def test_zero_refinement_leaves_boxes(self, rng):
        head = CSDNHead(toy_config(num_layers=1), seed=0)
        # refine output layer is zero-initialized by construction
        qs = head.init_queries()
        out, _ = head.csdn_layer(qs, toy_pyramid(rng), head.layers[0])
        np.testing.assert_allclose(out.boxes, qs.boxes, atol=1e-12)

    def test_nonzero_refinement_moves_boxes(self, rng):
        head = CSDNHead(toy_config(num_layers=1), seed=0)
        head.layers[0].refine.w2.value.data[:] = rng.normal(size=(8, 4))
        qs = head.init_queries()
        out, _ = head.csdn_layer(qs, toy_pyramid(rng), head.layers[0])
        assert np.abs(out.boxes - qs.boxes).max() > 1e-4

    def test_gated_single_branch_equals_stacked(self, rng):
        ga = CSDNHead(toy_config(num_layers=1, topology="d"), seed=3)
        st = CSDNHead(toy_config(num_layers=1, topology="d"), seed=3)
        # same seed -> identical parameters; run both modes by hand
        st.mode = "stacked"
        st.branch_names = ("deformable",)
        st.layers[0].branch_norms["deformable"] = st.layers[0].fuse_norm
        st.layers[0].gate = None
        st.layers[0].fuse_norm = None
        pyr = toy_pyramid(rng)
        out_g = ga.forward(pyr)
        out_s = st.forward(pyr)
        np.testing.assert_allclose(out_g.final.logits.data, out_s.final.logits.data, atol=1e-12)
        np.testing.assert_allclose(out_g.final.boxes.data, out_s.final.boxes.data, atol=1e-12)

    def test_gate_recorded_per_layer_in_gated_mode(self, rng):
        head = CSDNHead(toy_config(), seed=0)
        out = head.forward(toy_pyramid(rng))
        for layer in out.layers:
            assert layer.gate is not None
            np.testing.assert_allclose(layer.gate.weights.sum(axis=1), 1.0, atol=1e-9)

    def test_stacked_has_no_gate(self, rng):
        head = CSDNHead(toy_config(topology="s-d"), seed=0)
        out = head.forward(toy_pyramid(rng))
        assert all(layer.gate is None for layer in out.layers)


class TestHeadForward:
    def test_zero_layers_prediction_heads_only(self, rng):
        head = CSDNHead(toy_config(num_layers=0), seed=0)
        out = head.forward(toy_pyramid(rng))
        assert len(out.layers) == 1
        qs = head.init_queries()
        np.testing.assert_allclose(out.final.boxes.data, qs.boxes, atol=1e-15)

    def test_layer_count_parameter_arithmetic(self):
        p0 = CSDNHead(toy_config(num_layers=0), seed=0).parameter_count()
        p1 = CSDNHead(toy_config(num_layers=1), seed=0).parameter_count()
        p2 = CSDNHead(toy_config(num_layers=2), seed=0).parameter_count()
        p6 = CSDNHead(toy_config(num_layers=6), seed=0).parameter_count()
        per_layer = p1 - p0
        assert p2 - p0 == 2 * per_layer
        assert p6 - p2 == 4 * per_layer

    def test_deep_supervision_records_every_layer(self, rng):
        head = CSDNHead(toy_config(num_layers=3), seed=0)
        out = head.forward(toy_pyramid(rng))
        assert len(out.layers) == 3
        assert out.final is out.layers[-1]

    def test_bitwise_reproducible_across_runs(self, rng):
        pyr = toy_pyramid(rng)
        outs = []
        for _ in range(2):
            head = CSDNHead(toy_config(), seed=5)
            with no_grad():
                out = head.forward(pyr)
            outs.append((out.final.logits.data.copy(), out.final.boxes.data.copy()))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_boxes_valid_after_every_layer(self, rng):
        head = CSDNHead(toy_config(num_layers=4), seed=0)
        out = head.forward(toy_pyramid(rng))
        for layer in out.layers:
            b = layer.boxes.data
            assert (b > 0.0).all() and (b < 1.0).all()

    def test_mask_invariants_preserved_across_layers(self, rng):
        from csdn.geometry import neighbor_mask

        head = CSDNHead(toy_config(num_layers=3), seed=0)
        head.layers[0].refine.w2.value.data[:] = rng.normal(size=(8, 4)) * 0.5
        pyr = toy_pyramid(rng)
        qs = head.init_queries()
        for lp in head.layers:
            m = neighbor_mask(qs.boxes)
            np.testing.assert_array_equal(m.allowed, m.allowed.T)
            assert m.allowed.diagonal().all()
            qs, _ = head.csdn_layer(qs, pyr, lp)

    def test_query_permutation_equivariance(self, rng):
        pyr = toy_pyramid(rng)
        head = CSDNHead(toy_config(num_layers=2), seed=0)
        perm = rng.permutation(6)
        permuted = CSDNHead(toy_config(num_layers=2), seed=0)
        permuted.query_embed.value.data = head.query_embed.value.data[perm].copy()
        permuted.query_box.value.data = head.query_box.value.data[perm].copy()
        with no_grad():
            out = head.forward(pyr)
            out_p = permuted.forward(pyr)
        np.testing.assert_allclose(
            out_p.final.logits.data, out.final.logits.data[perm], atol=1e-9)
        np.testing.assert_allclose(
            out_p.final.boxes.data, out.final.boxes.data[perm], atol=1e-9)

    def test_pyramid_mismatch_rejected(self, rng):
        head = CSDNHead(toy_config(), seed=0)
        bad = toy_pyramid(rng, sizes=((4, 4),))
        with pytest.raises(Exception):
            head.forward(bad)

    def test_parameter_names_unique(self):
        head = CSDNHead(toy_config(), seed=0)
        names = [p.name for p in head.parameters()]
        assert len(names) == len(set(names))
