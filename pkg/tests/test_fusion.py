"""Fusion variant tests: gated experts, early aggregation, dynamic interaction."""

import numpy as np
import pytest

from eovseg import reference
from eovseg.fusion import EafWeights, SdiWeights, TdeeWeights, eaf, sdi, tdee, tdee_detailed
from eovseg.kernels import layer_norm
from eovseg.tensor import Rng

D = 8


class TestTdee:
    def test_zero_router_forced_path(self):
        w = TdeeWeights.build(1, D, D)
        w.router_m_w = np.zeros_like(w.router_m_w)
        w.router_m_b = np.zeros_like(w.router_m_b)
        w.router_s_w = np.zeros_like(w.router_s_w)
        w.router_s_b = np.zeros_like(w.router_s_b)
        trace = tdee_detailed(Rng(2).normal((3, D)), Rng(3).normal((3, D)), w)
        assert np.allclose(trace.gate_m, 0.5, atol=1e-6)
        assert np.allclose(trace.gate_s, 0.5, atol=1e-6)
        expected = 0.5 * (layer_norm(trace.fuse_m, *w.ln_fuse_m) + layer_norm(trace.fuse_s, *w.ln_fuse_s))
        assert np.max(np.abs(trace.core - expected)) < 1e-6

    def test_expert_swap_symmetry_bitwise(self):
        for seed in range(10):
            w = TdeeWeights.build(100 + seed, D, D)
            em = Rng(200 + seed).normal((4, D))
            es = Rng(300 + seed).normal((4, D))
            assert np.array_equal(tdee(em, es, w), tdee(es, em, w.swapped()))

    def test_stepwise_oracle_at_pinned_dims(self):
        worst = 0.0
        rng = Rng(4)
        for seed in range(20):
            w = TdeeWeights.build(400 + seed, 8, 8)
            em = rng.normal((4, 8))
            es = rng.normal((4, 8))
            err = np.max(np.abs(np.asarray(tdee(em, es, w), np.float64) - reference.tdee_reference(em, es, w)))
            worst = max(worst, err)
        assert worst < 1e-5

    def test_gates_strictly_inside_unit_interval(self):
        for seed in range(10):
            w = TdeeWeights.build(500 + seed, D, D)
            trace = tdee_detailed(Rng(seed).normal((5, D), std=3.0), Rng(seed + 1).normal((5, D), std=3.0), w)
            for g in (trace.gate_m, trace.gate_s):
                assert g.min() > 0.0 and g.max() < 1.0

    def test_output_shape(self):
        for n, d, dd in ((1, 4, 4), (5, 8, 4), (3, 8, 8)):
            w = TdeeWeights.build(6, d, dd)
            out = tdee(Rng(7).normal((n, d)), Rng(8).normal((n, d)), w)
            assert out.shape == (n, d)

    def test_row_count_mismatch(self):
        w = TdeeWeights.build(9, D, D)
        with pytest.raises(ValueError, match="row counts"):
            tdee(np.zeros((2, D), np.float32), np.zeros((3, D), np.float32), w)

    def test_odd_projection_width_rejected(self):
        with pytest.raises(ValueError, match="even"):
            TdeeWeights(
                proj_m=np.zeros((D, 3), np.float32),
                proj_s=np.zeros((D, 3), np.float32),
                router_m_w=np.zeros((1, 1), np.float32),
                router_m_b=np.zeros(1, np.float32),
                router_s_w=np.zeros((1, 1), np.float32),
                router_s_b=np.zeros(1, np.float32),
                ln_fuse_m=(np.ones(1, np.float32), np.zeros(1, np.float32)),
                ln_fuse_s=(np.ones(1, np.float32), np.zeros(1, np.float32)),
                ln_gate_m=(np.ones(1, np.float32), np.zeros(1, np.float32)),
                ln_gate_s=(np.ones(1, np.float32), np.zeros(1, np.float32)),
                out_w=np.zeros((1, D), np.float32),
                out_b=np.zeros(D, np.float32),
                ln_out=(np.ones(D, np.float32), np.zeros(D, np.float32)),
            )


class TestEaf:
    def test_selector_keeps_features(self):
        dv = 5
        w = EafWeights.build(1, D, dv)
        w.w = np.concatenate([np.eye(D, dtype=np.float32), np.zeros((D, dv), np.float32)], axis=1)
        w.b = np.zeros(D, np.float32)
        feat = Rng(2).normal((D, 3, 3))
        spat = Rng(3).normal((dv, 3, 3))
        assert np.array_equal(eaf(feat, spat, w), feat)

    def test_selector_keeps_spatial_channels(self):
        dv = D + 2  # spatial side wide enough to select D channels from
        w = EafWeights.build(4, D, dv)
        w.w = np.concatenate([np.zeros((D, D), np.float32), np.eye(D, dv, dtype=np.float32)], axis=1)
        w.b = np.zeros(D, np.float32)
        feat = Rng(5).normal((D, 2, 2))
        spat = Rng(6).normal((dv, 2, 2))
        assert np.array_equal(eaf(feat, spat, w), spat[:D])

    def test_extent_mismatch_rejected(self):
        w = EafWeights.build(7, D, 4)
        with pytest.raises(ValueError, match="extents"):
            eaf(np.zeros((D, 2, 2), np.float32), np.zeros((4, 3, 3), np.float32), w)

    def test_loop_oracle(self):
        w = EafWeights.build(8, D, 4)
        feat = Rng(9).normal((D, 3, 3))
        spat = Rng(10).normal((4, 3, 3))
        ref = reference.eaf_reference(feat, spat, w)
        assert np.max(np.abs(eaf(feat, spat, w) - ref)) < 1e-5


class TestSdi:
    def test_identity_pipeline(self):
        # forced kernel [0,1,0] per query and identity pointwise matrix
        w = SdiWeights.build(1, D, kernel_size=3, rank=D)
        w.gen_kernel_w = np.zeros_like(w.gen_kernel_w)
        w.gen_kernel_b = np.array([0, 1, 0], dtype=np.float32)
        w.gen_left_w = np.zeros_like(w.gen_left_w)
        w.gen_left_b = np.eye(D, dtype=np.float32).reshape(-1)
        w.gen_right_w = np.zeros_like(w.gen_right_w)
        w.gen_right_b = np.eye(D, dtype=np.float32).reshape(-1)
        es = Rng(2).normal((3, D))
        out = sdi(Rng(3).normal((3, D)), es, w)
        assert np.max(np.abs(out - es)) < 1e-6

    def test_zero_value_side(self):
        w = SdiWeights.build(4, D, 3, 2)
        out = sdi(Rng(5).normal((2, D)), np.zeros((2, D), np.float32), w)
        assert np.all(out == 0)

    def test_loop_oracle_n2_d6_k3_r2(self):
        w = SdiWeights.build(6, 6, 3, 2)
        em = Rng(7).normal((2, 6), std=0.5)
        es = Rng(8).normal((2, 6), std=0.5)
        ref = reference.sdi_reference(em, es, w)
        assert np.max(np.abs(sdi(em, es, w) - ref)) < 1e-5

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            SdiWeights.build(9, D, kernel_size=2, rank=2)
