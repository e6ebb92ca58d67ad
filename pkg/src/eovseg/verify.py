"""Oracle-equivalence and invariant suite behind the `verify` command.

Every vectorized kernel is compared against its loop oracle on seeded random
instances; module forwards are compared against their step-by-step references;
bound invariants (attention weights, gates, softmax sums) are asserted on a
real pipeline run; analytic MAC counts are checked against the instrumented
oracle counters.  ``--sabotage <kernel>`` flips the sign of one kernel's
output to prove the harness actually detects faults.
"""

from __future__ import annotations

import contextlib
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels, oracles, reference
from .aggregator import AggregatorWeights, SyntheticBackbone, build_pyramid, extract_features, aggregate
from .classifier import (
    ClassScores,
    EnsembleParams,
    build_text_embeddings,
    classify,
    ensemble,
    in_vocab_scores,
    out_vocab_scores,
)
from .config import ModelConfig
from .decoder import (
    DecoderWeights,
    MaskSet,
    cross_attention_baseline,
    dda,
    decoder_forward,
    initial_attention,
    mask_kernels,
    mask_pool,
    predict_masks,
    refine_kernels,
)
from .evaluation import (
    PanopticAnnotation,
    SceneSpec,
    SegmentRecord,
    generate_scene,
    match_segments,
    miou,
    pq_metrics,
)
from .fusion import SdiWeights, TdeeWeights, EafWeights, eaf, sdi, tdee, tdee_detailed
from .pipeline import forward, forward_traced, replay_trace
from .profiler import count_macs
from .spatial import UpsamplerWeights, VitBlockWeights, spatial_embeddings, spatial_features, vit_block_features
from .tensor import Rng, read_eovt
from .vas import VasWeights, vas_apply, vas_attention, vas_forward
from .weights import build_weights

KERNEL_TOL = 1e-5
SABOTAGE_TARGETS = (
    "contract",
    "softmax",
    "layer_norm",
    "sigmoid",
    "gelu",
    "relu",
    "conv2d_1x1",
    "conv2d_3x3",
    "conv2d_depthwise_separable",
    "depthwise_conv1d",
    "transposed_conv2d",
    "bilinear_upsample",
    "reduce_max",
    "l2_normalize",
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@contextlib.contextmanager
def sabotage_kernel(name: str):
    """Flip the sign of one kernel's output for the duration of the block."""
    if name not in SABOTAGE_TARGETS:
        raise ValueError(f"sabotage: unknown kernel {name!r}; choose from {SABOTAGE_TARGETS}")
    original = getattr(kernels, name)

    def flipped(*args, **kwargs):
        return -original(*args, **kwargs)

    setattr(kernels, name, flipped)
    try:
        yield
    finally:
        setattr(kernels, name, original)


def _max_err(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def _tol_check(err: float, tol: float) -> tuple[bool, str]:
    return err <= tol, f"max err {err:.2e} (tol {tol:.0e})"


# ---------------------------------------------------------------------------
# kernel equivalence checks


def _rand_shape(rng: Rng, rank: int, hi: int = 6) -> tuple[int, ...]:
    return tuple(int(rng.integers(1, hi + 1)) for _ in range(rank))


CONTRACT_SPECS = (
    ("ij,jk->ik", 4),
    ("bij,bjk->bik", 4),
    ("nd,dm->nm", 4),
    ("bmchw,bnmc->bmhwn", 3),
)


def check_contract(rng: Rng, trials: int):
    worst = 0.0
    for t in range(trials):
        spec, hi = CONTRACT_SPECS[t % len(CONTRACT_SPECS)]
        lhs, _ = spec.split("->")
        a_labels, b_labels = lhs.split(",")
        extents = {lab: int(rng.integers(1, hi + 1)) for lab in set(a_labels + b_labels)}
        a = rng.normal(tuple(extents[lab] for lab in a_labels))
        b = rng.normal(tuple(extents[lab] for lab in b_labels))
        worst = max(worst, _max_err(kernels.contract(a, b, spec), oracles.contract_oracle(a, b, spec)))
    return _tol_check(worst, KERNEL_TOL)


def check_softmax(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        rank = int(rng.integers(1, 4))
        x = rng.normal(_rand_shape(rng, rank), std=3.0)
        axis = int(rng.integers(0, rank))
        worst = max(worst, _max_err(kernels.softmax(x, axis), oracles.softmax_oracle(x, axis)))
    return _tol_check(worst, 1e-6)


def check_softmax_properties(rng: Rng, trials: int):
    for _ in range(trials):
        x = rng.normal((3, 5), std=4.0)
        out = kernels.softmax(x, 1)
        if _max_err(out.sum(axis=1), np.ones(3)) > 1e-6:
            return False, "rows do not sum to 1"
        shifted = kernels.softmax(x + np.float32(rng.normal((1,))[0]), 1)
        if _max_err(out, shifted) > 1e-5:
            return False, "not shift invariant"
    return True, "sum=1 and shift invariance hold"


def check_layer_norm(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        x = rng.normal((n, d), std=2.0)
        gamma = rng.normal((d,))
        beta = rng.normal((d,))
        worst = max(
            worst,
            _max_err(kernels.layer_norm(x, gamma, beta), oracles.layer_norm_oracle(x, gamma, beta)),
        )
    return _tol_check(worst, KERNEL_TOL)


def _check_pointwise(name, oracle):
    def run(rng: Rng, trials: int):
        worst = 0.0
        for _ in range(trials):
            x = rng.normal(_rand_shape(rng, int(rng.integers(1, 4))), std=3.0)
            worst = max(worst, _max_err(kernels.pointwise(name, x), oracle(x)))
        return _tol_check(worst, 1e-6)

    return run


def check_conv2d_1x1(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        c_in, c_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        x = rng.normal((c_in, h, w))
        weight = rng.normal((c_out, c_in))
        bias = rng.normal((c_out,))
        worst = max(
            worst,
            _max_err(
                kernels.conv2d(x, (weight, bias), "pointwise_1x1"),
                oracles.conv2d_1x1_oracle(x, weight, bias),
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_conv2d_3x3(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.normal((c_in, h, w))
        weight = rng.normal((c_out, c_in, 3, 3))
        bias = rng.normal((c_out,))
        worst = max(
            worst,
            _max_err(
                kernels.conv2d(x, (weight, bias), "k3_pad1"),
                oracles.conv2d_3x3_oracle(x, weight, bias),
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_conv2d_depthwise_separable(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        c, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.normal((c, h, w))
        w_depth = rng.normal((c, 3, 3))
        w_point = rng.normal((c_out, c))
        bias = rng.normal((c_out,))
        worst = max(
            worst,
            _max_err(
                kernels.conv2d(x, (w_depth, w_point, bias), "depthwise_separable"),
                oracles.conv2d_depthwise_separable_oracle(x, w_depth, w_point, bias),
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_depthwise_conv1d(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        m = [1, 3, 5][int(rng.integers(0, 3))]
        signals = rng.normal((n, d))
        ker = rng.normal((n, m))
        worst = max(
            worst,
            _max_err(
                kernels.depthwise_conv1d(signals, ker),
                oracles.depthwise_conv1d_oracle(signals, ker),
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_transposed_conv2d(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x = rng.normal((c_in, h, w))
        weight = rng.normal((c_in, c_out, 2, 2))
        bias = rng.normal((c_out,))
        worst = max(
            worst,
            _max_err(
                kernels.transposed_conv2d(x, weight, bias),
                oracles.transposed_conv2d_oracle(x, weight, bias),
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_bilinear_upsample(rng: Rng, trials: int):
    worst = 0.0
    for t in range(trials):
        factor = (2, 4, 8)[t % 3]
        c = int(rng.integers(1, 4))
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x = rng.normal((c, h, w))
        worst = max(
            worst,
            _max_err(
                kernels.bilinear_upsample(x, factor), oracles.bilinear_upsample_oracle(x, factor)
            ),
        )
    return _tol_check(worst, 1e-6)


def check_bilinear_mean(rng: Rng, trials: int):
    # means measured with float64 accumulation; the tolerance is on the kernel
    for t in range(trials):
        factor = (2, 4, 8)[t % 3]
        value = float(rng.normal((1,))[0])
        const = np.full((2, 3, 3), value, dtype=np.float32)
        up = kernels.bilinear_upsample(const, factor)
        if not np.all(up == np.float32(value)):
            return False, "constant input did not stay exactly constant"
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        ramp = np.add.outer(np.arange(h), np.arange(w)).astype(np.float32)[None]
        up = kernels.bilinear_upsample(ramp, factor)
        if abs(float(up.mean(dtype=np.float64)) - float(ramp.mean(dtype=np.float64))) > 1e-5:
            return False, "ramp input mean drifted"
    return True, "constancy exact; ramp mean preserved"


def check_reduce_max(rng: Rng, trials: int):
    for _ in range(trials):
        rank = int(rng.integers(1, 4))
        x = rng.normal(_rand_shape(rng, rank))
        axis = int(rng.integers(0, rank))
        if not np.array_equal(
            np.asarray(kernels.reduce_max(x, axis), np.float64), oracles.reduce_max_oracle(x, axis)
        ):
            return False, "mismatch with loop oracle"
    return True, "exact match"


def check_l2_normalize(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        x = rng.normal((int(rng.integers(1, 6)), int(rng.integers(1, 9))))
        out = kernels.l2_normalize(x, axis=1)
        worst = max(worst, _max_err(out, oracles.l2_normalize_oracle(x, axis=1)))
        norms = np.linalg.norm(out.astype(np.float64), axis=1)
        worst = max(worst, float(np.max(np.abs(norms - 1.0))))
    return _tol_check(worst, 1e-6)


def check_kernel_determinism(rng: Rng, trials: int):
    x = rng.normal((4, 5, 5))
    w = rng.normal((4, 4, 3, 3))
    b = rng.normal((4,))
    for _ in range(max(2, trials // 5)):
        a1 = kernels.conv2d_3x3(x, w, b)
        a2 = kernels.conv2d_3x3(x, w, b)
        s1 = kernels.softmax(x, 0)
        s2 = kernels.softmax(x, 0)
        if not (np.array_equal(a1, a2) and np.array_equal(s1, s2)):
            return False, "repeated evaluation is not bitwise identical"
    return True, "bitwise stable across repeated evaluation"


# ---------------------------------------------------------------------------
# module-level checks


def check_vas_transliteration(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        d, heads = 8, 2
        n_class = int(rng.integers(1, 5))
        w = VasWeights.build(int(rng.integers(0, 1 << 31)), d, heads, 1.3, 0.2)
        feat = rng.normal((d, 3, 2))
        text = rng.normal((n_class, d))
        worst = max(
            worst,
            _max_err(vas_forward(feat, text, w), reference.vas_forward_reference(feat, text, w)),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_vas_bounds(rng: Rng, trials: int):
    for _ in range(trials):
        d, heads = 8, 4
        n_class = int(rng.integers(1, 6))
        w = VasWeights.build(int(rng.integers(0, 1 << 31)), d, heads)
        attn = vas_attention(rng.normal((d, 3, 3), std=2.0), rng.normal((n_class, d), std=2.0), w)
        lo = np.float32(1.0) / np.float32(n_class)
        if attn.min() < lo or attn.max() > 1.0:
            return False, f"attention weight outside [{lo}, 1]: [{attn.min()}, {attn.max()}]"
        if n_class == 1 and not np.all(attn == 1.0):
            return False, "singleton vocabulary must give exactly 1.0"
    return True, "weights within [1/N_class, 1]; singleton exact"


def check_vas_permutation(rng: Rng, trials: int):
    for _ in range(trials):
        d, heads, n_class = 8, 2, 4
        w = VasWeights.build(int(rng.integers(0, 1 << 31)), d, heads)
        feat = rng.normal((d, 2, 3))
        text = rng.normal((n_class, d))
        perm = np.argsort(rng.normal((n_class,)))
        if not np.array_equal(vas_forward(feat, text, w), vas_forward(feat, text[perm], w)):
            return False, "output changed under vocabulary permutation"
    return True, "bitwise invariant to vocabulary row permutation"


def check_vas_identity_gate(rng: Rng, trials: int):
    from .vas import project_features

    for _ in range(trials):
        d, heads = 8, 2
        w = VasWeights.build(int(rng.integers(0, 1 << 31)), d, heads, scale=0.0, offset=1.0)
        feat = rng.normal((d, 2, 2))
        text = rng.normal((3, d))
        if not np.array_equal(vas_forward(feat, text, w), project_features(feat, w)):
            return False, "scale=0 offset=1 did not reduce to the projection"
    return True, "scale=0/offset=1 reduces exactly to the feature projection"


def check_tdee_transliteration(rng: Rng, trials: int):
    # width 8 keeps the layer norms well conditioned; 2-wide rows can collapse
    # to near-zero variance where LN amplifies float32 rounding past any tolerance
    worst = 0.0
    for _ in range(trials):
        n, d, dd = 4, 8, 8
        w = TdeeWeights.build(int(rng.integers(0, 1 << 31)), d, dd)
        em = rng.normal((n, d))
        es = rng.normal((n, d))
        worst = max(worst, _max_err(tdee(em, es, w), reference.tdee_reference(em, es, w)))
    return _tol_check(worst, KERNEL_TOL)


def check_tdee_symmetry(rng: Rng, trials: int):
    for _ in range(trials):
        w = TdeeWeights.build(int(rng.integers(0, 1 << 31)), 8, 8)
        em = rng.normal((3, 8))
        es = rng.normal((3, 8))
        if not np.array_equal(tdee(em, es, w), tdee(es, em, w.swapped())):
            return False, "swapping expert sides changed the output"
    return True, "bitwise symmetric under expert swap"


def check_tdee_gates(rng: Rng, trials: int):
    for _ in range(trials):
        w = TdeeWeights.build(int(rng.integers(0, 1 << 31)), 8, 8)
        trace = tdee_detailed(rng.normal((4, 8), std=2.0), rng.normal((4, 8), std=2.0), w)
        for g in (trace.gate_m, trace.gate_s):
            if g.min() <= 0.0 or g.max() >= 1.0:
                return False, f"gate outside (0,1): [{g.min()}, {g.max()}]"
    return True, "gates strictly inside (0, 1)"


def check_tdee_zero_router(rng: Rng, trials: int):
    for _ in range(trials):
        w = TdeeWeights.build(int(rng.integers(0, 1 << 31)), 8, 8)
        half = w.half
        w.router_m_w = np.zeros_like(w.router_m_w)
        w.router_m_b = np.zeros_like(w.router_m_b)
        w.router_s_w = np.zeros_like(w.router_s_w)
        w.router_s_b = np.zeros_like(w.router_s_b)
        trace = tdee_detailed(rng.normal((3, 8)), rng.normal((3, 8)), w)
        if _max_err(trace.gate_m, np.full((3, half), 0.5)) > 1e-6:
            return False, "zero router did not give 0.5 gates"
        expected = 0.5 * (
            kernels.layer_norm(trace.fuse_m, *w.ln_fuse_m)
            + kernels.layer_norm(trace.fuse_s, *w.ln_fuse_s)
        )
        if _max_err(trace.core, expected) > 1e-6:
            return False, "core mismatch in forced-path evaluation"
    return True, "zero router gives 0.5 gates and the averaged core"


def check_eaf_oracle(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        d, dv = 4, 3
        w = EafWeights.build(int(rng.integers(0, 1 << 31)), d, dv)
        feat = rng.normal((d, 3, 3))
        spat = rng.normal((dv, 3, 3))
        worst = max(worst, _max_err(eaf(feat, spat, w), reference.eaf_reference(feat, spat, w)))
    return _tol_check(worst, KERNEL_TOL)


def check_sdi_oracle(rng: Rng, trials: int):
    # std 0.5 keeps the generated three-matmul chain O(1) so the absolute
    # tolerance is meaningful
    worst = 0.0
    for _ in range(trials):
        w = SdiWeights.build(int(rng.integers(0, 1 << 31)), 6, 3, 2)
        em = rng.normal((2, 6), std=0.5)
        es = rng.normal((2, 6), std=0.5)
        worst = max(worst, _max_err(sdi(em, es, w), reference.sdi_reference(em, es, w)))
    return _tol_check(worst, KERNEL_TOL)


def _small_decoder(rng: Rng, n=3, d=8, layers=1) -> DecoderWeights:
    return DecoderWeights.build(
        int(rng.integers(0, 1 << 31)), d, n, layers, kernel_size=3, heads=2, ffn_expansion=2
    )


def check_initial_attention(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        feat = rng.normal((6, 3, 4))
        masks = MaskSet(logits=rng.normal((3, 3, 4), std=2.0))
        worst = max(
            worst,
            _max_err(
                initial_attention(feat, masks),
                reference.initial_attention_reference(feat, masks.logits),
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_dda(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        proj = rng.normal((6, 3))
        kernels_in = rng.normal((3, 6))
        pooled = rng.normal((3, 6))
        worst = max(
            worst,
            _max_err(dda(kernels_in, pooled, proj), reference.dda_reference(kernels_in, pooled, proj)),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_refine(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        w = _small_decoder(rng)
        x = rng.normal((3, 8))
        worst = max(
            worst,
            _max_err(
                refine_kernels(x, w.layers[0]), reference.refine_kernels_reference(x, w.layers[0])
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_cross_attention(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        w = _small_decoder(rng)
        x = rng.normal((2, 8))
        feat = rng.normal((8, 2, 2))
        worst = max(
            worst,
            _max_err(
                cross_attention_baseline(x, feat, w.layers[0].cross_attn),
                reference.cross_attention_reference(x, feat, w.layers[0].cross_attn),
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_mask_ops(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        w = _small_decoder(rng)
        x = rng.normal((3, 8))
        feat = rng.normal((8, 3, 3))
        worst = max(
            worst, _max_err(mask_kernels(x, w.mask_mlp), reference.mask_kernels_reference(x, w.mask_mlp))
        )
        masks = predict_masks(x, feat)
        worst = max(worst, _max_err(masks.logits, reference.predict_masks_reference(x, feat)))
        worst = max(
            worst, _max_err(mask_pool(feat, masks), reference.mask_pool_reference(feat, masks.logits))
        )
    return _tol_check(worst, KERNEL_TOL)


def check_decoder_unrolled(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        w = _small_decoder(rng, layers=2)
        feat = rng.normal((8, 4, 4))
        out = decoder_forward(feat, w, "dda")
        logits, embed, kern = reference.decoder_forward_reference(feat, w, "dda")
        worst = max(worst, _max_err(out.masks.logits, logits))
        worst = max(worst, _max_err(out.mask_embeddings, embed))
        worst = max(worst, _max_err(out.kernels, kern))
    return _tol_check(worst, 1e-4)


def check_aggregator_oracle(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(max(1, trials // 5)):
        widths = (3, 4, 5, 6)
        d = 4
        backbone = SyntheticBackbone.build(int(rng.integers(0, 1 << 31)), widths)
        weights = AggregatorWeights.build(int(rng.integers(0, 1 << 31)), d, widths)
        image = rng.normal((3, 32, 32))
        feats = extract_features(image, backbone)
        ref_feats = reference.backbone_reference(image, backbone)
        for level in (2, 3, 4, 5):
            worst = max(worst, _max_err(feats[level], ref_feats[level]))
        pyramid = build_pyramid(feats, weights)
        ref_levels = reference.build_pyramid_reference(ref_feats, weights)
        for level in (2, 3, 4, 5):
            worst = max(worst, _max_err(pyramid.levels[level], ref_levels[level]))
        worst = max(
            worst, _max_err(aggregate(pyramid, weights), reference.aggregate_reference(ref_levels, weights))
        )
    return _tol_check(worst, KERNEL_TOL)


def check_spatial_oracle(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(max(1, trials // 5)):
        dv, d = 4, 6
        vit = VitBlockWeights.build(int(rng.integers(0, 1 << 31)), dv, 2, (2, 2))
        up = UpsamplerWeights.build(int(rng.integers(0, 1 << 31)), dv, d)
        image = rng.normal((3, 32, 32))
        grid = vit_block_features(image, vit)
        ref_grid = reference.vit_block_reference(image, vit)
        worst = max(worst, _max_err(grid, ref_grid))
        spat = spatial_features(grid, up)
        worst = max(worst, _max_err(spat, reference.spatial_features_reference(ref_grid, up)))
        masks = MaskSet(logits=rng.normal((3, 8, 8)))
        worst = max(
            worst,
            _max_err(spatial_embeddings(spat, masks), reference.mask_pool_reference(spat, masks.logits)),
        )
    return _tol_check(worst, 1e-4)


def check_classifier_oracles(rng: Rng, trials: int):
    worst = 0.0
    for _ in range(trials):
        m, n_class, d = 3, 4, 6
        templates = rng.normal((m, n_class, d))
        names = [f"c{i}" for i in range(n_class)]
        seen = np.arange(n_class) % 2 == 0
        text = build_text_embeddings(templates, names, seen)
        worst = max(
            worst, _max_err(text.embeddings, reference.build_text_embeddings_reference(templates))
        )
        inst = rng.normal((2, d))
        scores = in_vocab_scores(inst, text, 0.07)
        worst = max(
            worst,
            _max_err(scores.values, reference.in_vocab_scores_reference(inst, text.embeddings, 0.07)),
        )
        if _max_err(scores.values.sum(axis=1), np.ones(2)) > 1e-6:
            return False, "score rows do not sum to 1"
        feat = rng.normal((d, 3, 3))
        masks = MaskSet(logits=rng.normal((2, 3, 3)))
        out = out_vocab_scores(feat, masks, text, 0.07)
        worst = max(
            worst,
            _max_err(
                out.values,
                reference.out_vocab_scores_reference(feat, masks.logits, text.embeddings, 0.07),
            ),
        )
    return _tol_check(worst, KERNEL_TOL)


def check_ensemble(rng: Rng, trials: int):
    g = ClassScores(np.float32([[0.8]]), "in_vocab")
    o = ClassScores(np.float32([[0.5]]), "out_vocab")
    seen = np.array([True])
    got = ensemble(g, o, EnsembleParams(alpha=0.4, beta=0.8, method="geometric"), seen).values[0, 0]
    want = 0.8**0.6 * 0.5**0.4  # = 0.6628908034679974
    if abs(float(got) - want) > 1e-6:
        return False, f"geometric value {got} != {want}"
    for _ in range(trials):
        s_in = ClassScores(kernels.softmax(rng.normal((3, 4), std=2.0), 1), "in_vocab")
        s_out = ClassScores(kernels.softmax(rng.normal((3, 4), std=2.0), 1), "out_vocab")
        seen = rng.normal((4,)) > 0
        for method in ("geometric", "arithmetic"):
            zero = ensemble(s_in, s_out, EnsembleParams(0.0, 0.0, method), seen)
            one = ensemble(s_in, s_out, EnsembleParams(1.0, 1.0, method), seen)
            if not np.array_equal(zero.values, s_in.values):
                return False, f"alpha=beta=0 not bitwise S_I for {method}"
            if not np.array_equal(one.values, s_out.values):
                return False, f"alpha=beta=1 not bitwise S_O for {method}"
            params = EnsembleParams(0.4, 0.8, method)
            base = ensemble(s_in, s_out, params, seen).values
            bumped_vals = s_out.values.copy()
            bumped_vals[1, 2] += np.float32(0.05)
            bumped = ensemble(s_in, ClassScores(bumped_vals, "out_vocab"), params, seen).values
            if bumped[1, 2] < base[1, 2]:
                return False, f"monotonicity violated for {method}"
    return True, "degenerate cases bitwise; reference value and monotonicity hold"


def check_classify(rng: Rng, trials: int):
    for _ in range(trials):
        vals = kernels.softmax(rng.normal((4, 3), std=2.0), 1)
        masks = MaskSet(logits=rng.normal((4, 2, 2)))
        labels = classify(masks, ClassScores(vals, "ensembled"), 0.0)
        for lab in labels:
            if lab.class_id != int(np.argmax(vals[lab.mask_index])):
                return False, "argmax mismatch"
        scaled = classify(masks, ClassScores(vals * np.float32(3.0), "ensembled"), 0.0)
        if [(l.mask_index, l.class_id) for l in labels] != [
            (l.mask_index, l.class_id) for l in scaled
        ]:
            return False, "argmax not invariant to positive row scaling"
    return True, "argmax oracle and scale invariance hold"


# ---------------------------------------------------------------------------
# metric checks


def _random_annotation(rng: Rng, h=12, w=12, n_seg=4, n_class=3) -> PanopticAnnotation:
    seg = rng.integers(0, n_seg + 1, size=(h, w)).astype(np.int32)  # 0 stays void
    records = []
    for sid in np.unique(seg):
        if sid == 0:
            continue
        records.append(
            SegmentRecord(
                segment_id=int(sid),
                class_id=int(rng.integers(0, n_class)),
                is_thing=bool(rng.integers(0, 2)),
            )
        )
    return PanopticAnnotation(segment_map=seg, segments=records)


def check_pq_identity(rng: Rng, trials: int):
    for _ in range(trials):
        pred = _random_annotation(rng)
        gt = _random_annotation(rng)
        result = pq_metrics(pred, gt)
        for cid, c in result.per_class.items():
            if c.tp > 0 and abs(c.pq - c.sq * c.rq) > 1e-9:
                return False, f"PQ != SQ*RQ for class {cid}"
            for v in (c.pq, c.sq, c.rq):
                if not 0.0 <= v <= 1.0:
                    return False, "metric outside [0, 1]"
    return True, "PQ = SQ*RQ and bounds hold on random pairs"


def check_pq_cases(rng: Rng, trials: int):
    seg = np.zeros((10, 10), dtype=np.int32)
    seg[:5] = 1
    seg[5:] = 2
    gt = PanopticAnnotation(
        segment_map=seg,
        segments=[SegmentRecord(1, 0, True), SegmentRecord(2, 0, True)],
    )
    pred_map = np.zeros((10, 10), dtype=np.int32)
    pred_map[:4] = 1  # overlaps 40 of segment 1's 50 pixels, IoU = 0.8
    pred = PanopticAnnotation(segment_map=pred_map, segments=[SegmentRecord(1, 0, True)])
    r = pq_metrics(pred, gt).per_class[0]
    if abs(r.pq - 0.8 / 1.5) > 1e-4 or abs(r.sq - 0.8) > 1e-9 or abs(r.rq - 1 / 1.5) > 1e-9:
        return False, f"hand case mismatch: pq={r.pq} sq={r.sq} rq={r.rq}"
    perfect = pq_metrics(gt, gt)
    if perfect.pq != 1.0 or miou(gt.semantic_map(), gt.semantic_map()) != 1.0:
        return False, "pred == gt must give PQ = mIoU = 1"
    return True, "hand-computed and identity cases match"


def check_match_uniqueness(rng: Rng, trials: int):
    for _ in range(trials):
        pred = _random_annotation(rng, n_seg=5)
        gt = _random_annotation(rng, n_seg=5)
        matches = match_segments(pred, gt)
        pred_ids = [m.pred_id for m in matches]
        gt_ids = [m.gt_id for m in matches]
        if len(pred_ids) != len(set(pred_ids)) or len(gt_ids) != len(set(gt_ids)):
            return False, "a segment matched more than once"
    return True, "IoU > 0.5 matching is one-to-one"


# ---------------------------------------------------------------------------
# analytic MACs vs instrumented oracles


def _instrumented_config() -> ModelConfig:
    return ModelConfig(
        embed_dim=8,
        vit_dim=4,
        vas_heads=2,
        n_queries=3,
        decoder_layers=2,
        decoder_heads=2,
        ffn_expansion=2,
        tdee_dim=8,
        sdi_rank=2,
        vit_heads=2,
        backbone_widths=(4, 6, 8, 8),
        weights_seed=11,
    )


def check_macs_instrumented(rng: Rng, trials: int):
    cfg = _instrumented_config()
    image_hw = (32, 32)
    n_class = 3
    bundle = build_weights(cfg, image_hw)
    image = rng.normal((3, *image_hw))
    text_rows = kernels.l2_normalize(rng.normal((n_class, cfg.embed_dim)), axis=1)

    details = []
    for mode in ("tdee", "sdi", "eaf", "none"):
        cfg_mode = ModelConfig(**{**cfg.to_dict(), "fusion": mode})
        analytic = count_macs(cfg_mode, image_hw, n_class)

        c = oracles.MacCounter()
        feats = reference.backbone_reference(image, bundle.backbone, c)
        if c.count != analytic["backbone"]:
            return False, f"backbone {c.count} != {analytic['backbone']}"

        c = oracles.MacCounter()
        levels = reference.build_pyramid_reference(feats, bundle.aggregator, c)
        agg = reference.aggregate_reference(levels, bundle.aggregator, c)
        if c.count != analytic["aggregator"]:
            return False, f"aggregator {c.count} != {analytic['aggregator']}"

        c = oracles.MacCounter()
        reference.vas_forward_reference(agg.astype(np.float32), text_rows, bundle.vas, c)
        if c.count != analytic["vas"]:
            return False, f"vas {c.count} != {analytic['vas']}"

        feat_small = rng.normal((cfg.embed_dim, image_hw[0] // 4, image_hw[1] // 4))
        c = oracles.MacCounter()
        ref_out = _reference_decoder_with_macs(feat_small, bundle.decoder, c)
        if c.count != analytic["decoder"]:
            return False, f"decoder {c.count} != {analytic['decoder']}"

        c = oracles.MacCounter()
        grid = reference.vit_block_reference(image, bundle.vit, c)
        if mode in ("sdi", "tdee"):
            spat = reference.spatial_features_reference(grid, bundle.upsampler, c)
            reference.mask_pool_reference(spat.astype(np.float32), ref_out[0].astype(np.float32), c)
        if c.count != analytic["spatial"]:
            return False, f"spatial[{mode}] {c.count} != {analytic['spatial']}"

        c = oracles.MacCounter()
        em = rng.normal((cfg.n_queries, cfg.embed_dim))
        es = rng.normal((cfg.n_queries, cfg.embed_dim))
        if mode == "tdee":
            reference.tdee_reference(em, es, bundle.tdee, c)
        elif mode == "sdi":
            reference.sdi_reference(em, es, bundle.sdi, c)
        elif mode == "eaf":
            up = oracles.bilinear_upsample_oracle(grid, 4, c)
            reference.eaf_reference(
                feat_small, up.astype(np.float32), bundle.eaf, c
            )
        if c.count != analytic["fusion"]:
            return False, f"fusion[{mode}] {c.count} != {analytic['fusion']}"

        c = oracles.MacCounter()
        w_clip, b_clip = bundle.clip_proj
        clip = oracles.conv2d_1x1_oracle(feats[5], w_clip, b_clip, c)
        clip = oracles.bilinear_upsample_oracle(clip, 8, c)
        reference.in_vocab_scores_reference(em, text_rows, cfg.tau, c)
        reference.out_vocab_scores_reference(
            clip.astype(np.float32), ref_out[0].astype(np.float32), text_rows, cfg.tau, c
        )
        if c.count != analytic["classifier"]:
            return False, f"classifier {c.count} != {analytic['classifier']}"
        details.append(mode)
    return True, f"exact for modes {details}"


def _reference_decoder_with_macs(features, weights, c):
    kernels64 = np.asarray(weights.init_kernels, np.float64)
    logits = reference.predict_masks_reference(kernels64, features, c)
    for layer in weights.layers:
        pooled = reference.initial_attention_reference(features, logits, c)
        interacted = reference.dda_reference(kernels64, pooled, layer.kernel_proj, c)
        kernels64 = reference.refine_kernels_reference(interacted, layer, c)
        logits = reference.predict_masks_reference(
            reference.mask_kernels_reference(kernels64, weights.mask_mlp, c), features, c
        )
    embed = reference.mask_pool_reference(features, logits, c)
    return logits, embed, kernels64


# ---------------------------------------------------------------------------
# pipeline-level checks


def _verify_config() -> ModelConfig:
    return ModelConfig(
        embed_dim=64,
        vit_dim=32,
        vas_heads=4,
        n_queries=16,
        decoder_layers=2,
        decoder_heads=4,
        tdee_dim=64,
        vit_heads=4,
        backbone_widths=(16, 32, 48, 64),
        weights_seed=5,
    )


def _scene_and_text(cfg: ModelConfig, seed: int):
    spec = SceneSpec(seed=seed, embed_dim=cfg.embed_dim)
    image, gt, templates = generate_scene(spec)
    text = build_text_embeddings(templates, spec.class_names, spec.seen_mask())
    return spec, image, gt, templates, text


def check_pipeline_bounds(rng: Rng, trials: int):
    cfg = _verify_config()
    spec, image, _, _, text = _scene_and_text(cfg, seed=int(rng.integers(0, 1 << 31)))
    bundle = build_weights(cfg, (spec.height, spec.width))
    result = forward(image, text, spec.is_thing(), cfg, bundle)
    attn = result.trace["vas_attention"]
    lo = np.float32(1.0) / np.float32(text.n_classes)
    if attn.min() < lo or attn.max() > 1.0:
        return False, f"traced attention outside [1/N_class, 1]: [{attn.min()}, {attn.max()}]"
    trace = tdee_detailed(
        result.trace["mask_embeddings"], result.trace["spatial_embeddings"], bundle.tdee
    )
    if trace.gate_m.min() <= 0 or trace.gate_m.max() >= 1 or trace.gate_s.min() <= 0 or trace.gate_s.max() >= 1:
        return False, "tdee gates left (0, 1)"
    for key in ("scores_in_vocab", "scores_out_vocab"):
        sums = result.trace[key].sum(axis=1)
        if _max_err(sums, np.ones_like(sums)) > 1e-6:
            return False, f"{key} rows do not sum to 1"
    return True, "attention bounds, gate range, and score sums hold on a traced run"


def check_pipeline_modes(rng: Rng, trials: int):
    base = _verify_config()
    spec, image, _, _, text = _scene_and_text(base, seed=31)
    shapes = set()
    for mode in ("none", "eaf", "sdi", "tdee"):
        cfg = ModelConfig(**{**base.to_dict(), "fusion": mode})
        bundle = build_weights(cfg, (spec.height, spec.width))
        result = forward(image, text, spec.is_thing(), cfg, bundle)
        shapes.add(
            (
                result.panoptic.segment_map.shape,
                result.scores.values.shape,
                result.masks.logits.shape,
            )
        )
    if len(shapes) != 1:
        return False, f"output shapes differ across modes: {shapes}"
    return True, "all four fusion modes complete with identical output shapes"


def check_pipeline_determinism(rng: Rng, trials: int):
    cfg = _verify_config()
    spec, image, _, _, text = _scene_and_text(cfg, seed=77)
    bundle = build_weights(cfg, (spec.height, spec.width))
    r1 = forward(image, text, spec.is_thing(), cfg, bundle)
    r2 = forward(image, text, spec.is_thing(), cfg, bundle)
    if not np.array_equal(r1.panoptic.segment_map, r2.panoptic.segment_map):
        return False, "panoptic maps differ between identical runs"
    for key in r1.trace:
        if not np.array_equal(r1.trace[key], r2.trace[key]):
            return False, f"trace tensor {key} differs between identical runs"
    return True, "two identical runs are bitwise identical"


def check_trace_replay(rng: Rng, trials: int):
    cfg = _verify_config()
    spec, image, _, _, text = _scene_and_text(cfg, seed=13)
    bundle = build_weights(cfg, (spec.height, spec.width))
    with tempfile.TemporaryDirectory() as tmp:
        result = forward_traced(image, text, spec.is_thing(), cfg, bundle, tmp)
        dumped = {p.stem: read_eovt(p) for p in Path(tmp).glob("*.eovt")}
    for key, val in result.trace.items():
        if not np.array_equal(dumped[key], val):
            return False, f"dump/readback mismatch for {key}"
    failures = replay_trace(image, text, cfg, bundle, dumped)
    if failures:
        return False, f"stages not bitwise on replay: {failures}"
    return True, f"all {len(dumped)} dumped stages replay bitwise"


# ---------------------------------------------------------------------------
# the suite


CHECKS = [
    ("contract_vs_loop_oracle", check_contract),
    ("softmax_vs_loop_oracle", check_softmax),
    ("softmax_properties", check_softmax_properties),
    ("layer_norm_vs_loop_oracle", check_layer_norm),
    ("sigmoid_vs_loop_oracle", _check_pointwise("sigmoid", oracles.sigmoid_oracle)),
    ("gelu_vs_loop_oracle", _check_pointwise("gelu", oracles.gelu_oracle)),
    ("relu_vs_loop_oracle", _check_pointwise("relu", oracles.relu_oracle)),
    ("conv2d_1x1_vs_loop_oracle", check_conv2d_1x1),
    ("conv2d_3x3_vs_loop_oracle", check_conv2d_3x3),
    ("conv2d_depthwise_separable_vs_loop_oracle", check_conv2d_depthwise_separable),
    ("depthwise_conv1d_vs_loop_oracle", check_depthwise_conv1d),
    ("transposed_conv2d_vs_loop_oracle", check_transposed_conv2d),
    ("bilinear_upsample_vs_formula_oracle", check_bilinear_upsample),
    ("bilinear_mean_preservation", check_bilinear_mean),
    ("reduce_max_vs_loop_oracle", check_reduce_max),
    ("l2_normalize_vs_loop_oracle", check_l2_normalize),
    ("kernel_determinism", check_kernel_determinism),
    ("vas_vs_transliteration_oracle", check_vas_transliteration),
    ("vas_attention_bounds", check_vas_bounds),
    ("vas_vocabulary_permutation", check_vas_permutation),
    ("vas_identity_gate", check_vas_identity_gate),
    ("tdee_vs_transliteration_oracle", check_tdee_transliteration),
    ("tdee_expert_swap_symmetry", check_tdee_symmetry),
    ("tdee_gate_range", check_tdee_gates),
    ("tdee_zero_router_forced_path", check_tdee_zero_router),
    ("eaf_vs_loop_oracle", check_eaf_oracle),
    ("sdi_vs_loop_oracle", check_sdi_oracle),
    ("initial_attention_vs_loop_oracle", check_initial_attention),
    ("dda_vs_loop_oracle", check_dda),
    ("refine_kernels_vs_attention_oracle", check_refine),
    ("cross_attention_vs_attention_oracle", check_cross_attention),
    ("mask_ops_vs_loop_oracles", check_mask_ops),
    ("decoder_vs_unrolled_oracle", check_decoder_unrolled),
    ("aggregator_vs_composition_oracle", check_aggregator_oracle),
    ("spatial_vs_composition_oracle", check_spatial_oracle),
    ("classifier_vs_loop_oracles", check_classifier_oracles),
    ("ensemble_correctness", check_ensemble),
    ("classify_argmax_oracle", check_classify),
    ("pq_identity_on_random_pairs", check_pq_identity),
    ("pq_hand_cases", check_pq_cases),
    ("segment_match_uniqueness", check_match_uniqueness),
    ("macs_analytic_vs_instrumented", check_macs_instrumented),
    ("pipeline_bound_invariants", check_pipeline_bounds),
    ("pipeline_fusion_modes", check_pipeline_modes),
    ("pipeline_determinism", check_pipeline_determinism),
    ("pipeline_trace_replay", check_trace_replay),
]


def run_checks(trials: int = 25, seed: int = 0, sabotage: str | None = None) -> list[CheckResult]:
    if trials < 1:
        raise ValueError(f"verify: trials must be >= 1, got {trials}")
    results = []
    ctx = contextlib.nullcontext() if sabotage is None else sabotage_kernel(sabotage)
    with ctx:
        for i, (name, fn) in enumerate(CHECKS):
            rng = Rng((seed << 8) + i + 1)
            t0 = time.perf_counter()
            try:
                passed, detail = fn(rng, trials)
            except Exception as exc:  # a crash in a check is a failure, not an abort
                passed, detail = False, f"raised {type(exc).__name__}: {exc}"
            elapsed = time.perf_counter() - t0
            results.append(CheckResult(name=name, passed=passed, detail=f"{detail} [{elapsed:.2f}s]"))
    return results
