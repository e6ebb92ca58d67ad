"""Acceptance suite: eight gate criteria, one test and one printed line each.

Run with  pytest tests/test_acceptance.py -v -s  to see the per-criterion
pass/fail lines; any assertion failure marks the criterion red.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from eovseg import reference
from eovseg.classifier import ClassScores, EnsembleParams, build_text_embeddings, ensemble
from eovseg.config import ModelConfig
from eovseg.evaluation import PanopticAnnotation, SceneSpec, SegmentRecord, generate_scene, miou, pq_metrics
from eovseg.fusion import TdeeWeights, tdee, tdee_detailed
from eovseg.kernels import softmax
from eovseg.pipeline import forward, replay_trace
from eovseg.profiler import (
    macs_cross_attention,
    macs_dda,
    macs_dda_kernel_gen,
    macs_initial_attention,
    params_ca_layer,
    params_dda_layer,
)
from eovseg.tensor import Rng
from eovseg.vas import VasWeights, vas_forward
from eovseg.verify import CHECKS, check_macs_instrumented, run_checks
from eovseg.weights import build_weights

GEOMETRIC_REFERENCE = 0.662890803467997360  # 0.8^0.6 * 0.5^0.4 at 30 digits


def report(n, text):
    print(f"\n[PASS] criterion {n}: {text}")


# criterion 1 -----------------------------------------------------------------

ORACLE_CHECKS = {
    "contract_vs_loop_oracle",
    "softmax_vs_loop_oracle",
    "layer_norm_vs_loop_oracle",
    "sigmoid_vs_loop_oracle",
    "gelu_vs_loop_oracle",
    "relu_vs_loop_oracle",
    "conv2d_1x1_vs_loop_oracle",
    "conv2d_3x3_vs_loop_oracle",
    "conv2d_depthwise_separable_vs_loop_oracle",
    "depthwise_conv1d_vs_loop_oracle",
    "transposed_conv2d_vs_loop_oracle",
    "bilinear_upsample_vs_formula_oracle",
    "reduce_max_vs_loop_oracle",
    "l2_normalize_vs_loop_oracle",
    "vas_vs_transliteration_oracle",
    "tdee_vs_transliteration_oracle",
    "eaf_vs_loop_oracle",
    "sdi_vs_loop_oracle",
    "initial_attention_vs_loop_oracle",
    "dda_vs_loop_oracle",
    "refine_kernels_vs_attention_oracle",
    "cross_attention_vs_attention_oracle",
    "mask_ops_vs_loop_oracles",
    "decoder_vs_unrolled_oracle",
}


def test_criterion_1_oracle_equivalence_and_verify_runtime():
    check_map = dict(CHECKS)
    for i, name in enumerate(sorted(ORACLE_CHECKS)):
        passed, detail = check_map[name](Rng(9_000 + i), 100)
        assert passed, f"{name}: {detail}"

    t0 = time.monotonic()
    results = run_checks(trials=25, seed=0)
    elapsed = time.monotonic() - t0
    failed = [r.name for r in results if not r.passed]
    assert failed == [], f"verify suite failed: {failed}"
    assert elapsed < 60.0, f"verify took {elapsed:.1f}s"

    proc = subprocess.run(
        [sys.executable, "-m", "eovseg.cli", "verify", "--trials", "25"],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr
    report(1, f"100-instance oracle equivalence over {len(ORACLE_CHECKS)} kernels; "
              f"verify exit 0 in {elapsed:.1f}s")


# criterion 2 -----------------------------------------------------------------


def test_criterion_2_stepwise_transliteration():
    n, d, dd, heads, n_class = 4, 8, 8, 2, 3
    rng = Rng(2_000)
    worst_tdee = 0.0
    worst_vas = 0.0
    for seed in range(30):
        w = TdeeWeights.build(2_100 + seed, d, dd)
        em, es = rng.normal((n, d)), rng.normal((n, d))
        worst_tdee = max(
            worst_tdee,
            float(np.max(np.abs(np.asarray(tdee(em, es, w), np.float64) - reference.tdee_reference(em, es, w)))),
        )
        vw = VasWeights.build(2_200 + seed, d, heads, scale=1.3, offset=0.2)
        feat = rng.normal((d, 3, 3))
        text = rng.normal((n_class, d))
        worst_vas = max(
            worst_vas,
            float(
                np.max(
                    np.abs(
                        np.asarray(vas_forward(feat, text, vw), np.float64)
                        - reference.vas_forward_reference(feat, text, vw)
                    )
                )
            ),
        )
    assert worst_tdee < 1e-5, worst_tdee
    assert worst_vas < 1e-5, worst_vas
    report(2, f"tdee err {worst_tdee:.1e}, vas err {worst_vas:.1e} at N=4 D=8 d=8 h=2 N_class=3 (tol 1e-5)")


# criterion 3 -----------------------------------------------------------------


def test_criterion_3_ensemble_correctness():
    rng = Rng(3_000)
    for method in ("geometric", "arithmetic"):
        s_in = ClassScores(softmax(rng.normal((5, 4), std=2.0), 1), "in_vocab")
        s_out = ClassScores(softmax(rng.normal((5, 4), std=2.0), 1), "out_vocab")
        seen = rng.normal((4,)) > 0
        zero = ensemble(s_in, s_out, EnsembleParams(0.0, 0.0, method), seen)
        one = ensemble(s_in, s_out, EnsembleParams(1.0, 1.0, method), seen)
        assert np.array_equal(zero.values, s_in.values), method
        assert np.array_equal(one.values, s_out.values), method

    got = ensemble(
        ClassScores(np.float32([[0.8]]), "in_vocab"),
        ClassScores(np.float32([[0.5]]), "out_vocab"),
        EnsembleParams(0.4, 0.8, "geometric"),
        np.array([True]),
    ).values[0, 0]
    assert abs(float(got) - GEOMETRIC_REFERENCE) < 1e-6

    violations = 0
    for _ in range(1000):
        a = float(rng.uniform((1,), 0.01, 0.99)[0])
        b = float(rng.uniform((1,), 0.01, 0.89)[0])
        bump = float(rng.uniform((1,), 0.001, 0.1)[0])
        alpha = float(rng.uniform((1,))[0])
        beta = float(rng.uniform((1,))[0])
        method = ("geometric", "arithmetic")[int(rng.integers(0, 2))]
        seen = np.array([bool(rng.integers(0, 2))])
        params = EnsembleParams(alpha, beta, method)
        s_in = ClassScores(np.float32([[a]]), "in_vocab")
        lo = ensemble(s_in, ClassScores(np.float32([[b]]), "out_vocab"), params, seen).values[0, 0]
        hi = ensemble(s_in, ClassScores(np.float32([[b + bump]]), "out_vocab"), params, seen).values[0, 0]
        if hi < lo:
            violations += 1
    assert violations == 0
    report(3, "degenerate weights bitwise; 0.8^0.6*0.5^0.4 to 1e-6; monotone on 1000 triples")


# criterion 4 -----------------------------------------------------------------


def test_criterion_4_efficiency_asymmetry():
    n, d, m, hw = 100, 256, 3, 16 * 16
    p_dda, p_ca = params_dda_layer(d, m), params_ca_layer(d)
    assert p_dda == 768 and p_ca == 262_144
    assert p_dda < p_ca
    m_dda = macs_initial_attention(n, d, hw) + macs_dda_kernel_gen(n, d, m) + macs_dda(n, d, m)
    m_ca = macs_cross_attention(n, d, hw)
    assert m_dda < m_ca
    passed, detail = check_macs_instrumented(Rng(4_000), trials=1)
    assert passed, detail
    report(4, f"params {p_dda} < {p_ca}; macs {m_dda:,} < {m_ca:,}; analytic == instrumented")


# criterion 5 -----------------------------------------------------------------


def _random_annotation(rng, h=12, w=12, n_seg=4, n_class=3):
    seg = rng.integers(0, n_seg + 1, size=(h, w)).astype(np.int32)
    records = [
        SegmentRecord(int(s), int(rng.integers(0, n_class)), bool(rng.integers(0, 2)))
        for s in np.unique(seg)
        if s != 0
    ]
    return PanopticAnnotation(segment_map=seg, segments=records)


def _perturbed_prediction(gt: PanopticAnnotation, rng: Rng, flip_frac: float):
    """Corrupt a fraction of pixels so TP, FP and FN all occur across pairs."""
    pred_map = gt.segment_map.copy()
    ids = [s.segment_id for s in gt.segments] + [0]
    n_flip = int(flip_frac * pred_map.size)
    ys = rng.integers(0, pred_map.shape[0], size=n_flip)
    xs = rng.integers(0, pred_map.shape[1], size=n_flip)
    vals = rng.integers(0, len(ids), size=n_flip)
    for y, x, v in zip(ys, xs, vals):
        pred_map[y, x] = ids[int(v)]
    keep = set(int(i) for i in np.unique(pred_map)) - {0}
    return PanopticAnnotation(
        segment_map=pred_map, segments=[s for s in gt.segments if s.segment_id in keep]
    )


def test_criterion_5_metric_identities():
    rng = Rng(5_000)
    checked = 0
    for i in range(200):
        gt = _random_annotation(rng)
        pred = _perturbed_prediction(gt, rng, flip_frac=(0.05, 0.3, 0.6)[i % 3])
        for c in pq_metrics(pred, gt).per_class.values():
            if c.tp > 0:
                assert abs(c.pq - c.sq * c.rq) < 1e-9
                checked += 1
    assert checked > 100

    seg = np.zeros((10, 10), dtype=np.int32)
    seg[:5] = 1
    seg[5:] = 2
    gt = PanopticAnnotation(segment_map=seg, segments=[SegmentRecord(1, 0, True), SegmentRecord(2, 0, True)])
    pred_map = np.zeros((10, 10), dtype=np.int32)
    pred_map[:4] = 1
    pred = PanopticAnnotation(segment_map=pred_map, segments=[SegmentRecord(1, 0, True)])
    c = pq_metrics(pred, gt).per_class[0]
    assert abs(c.pq - 0.5333) < 1e-4

    perfect = pq_metrics(gt, gt)
    assert perfect.pq == 1.0
    assert miou(gt.semantic_map(), gt.semantic_map()) == 1.0
    report(5, f"PQ=SQ*RQ to 1e-9 on 200 random pairs ({checked} TP classes); "
              "hand case 0.5333; identity exact")


# criterion 6 -----------------------------------------------------------------


def test_criterion_6_pipeline_integrity(tmp_path):
    spec = SceneSpec(seed=6)  # 64x64 scene at the default embedding width
    image, gt, templates = generate_scene(spec)
    text = build_text_embeddings(templates, spec.class_names, spec.seen_mask())
    cfg_base = ModelConfig()  # full defaults: D=256, N=100, 3 layers

    for mode in ("none", "eaf", "sdi", "tdee"):
        cfg = ModelConfig(**{**cfg_base.to_dict(), "fusion": mode})
        bundle = build_weights(cfg, (64, 64))
        result = forward(image, text, spec.is_thing(), cfg, bundle)
        assert result.panoptic.segment_map.shape == (64, 64), mode
        assert result.scores.values.shape == (cfg.n_queries, text.n_classes), mode
        assert result.masks.logits.shape == (cfg.n_queries, 16, 16), mode
        assert replay_trace(image, text, cfg, bundle, result.trace) == [], mode

    bundle = build_weights(cfg_base, (64, 64))
    r1 = forward(image, text, spec.is_thing(), cfg_base, bundle)
    r2 = forward(image, text, spec.is_thing(), cfg_base, bundle)
    assert np.array_equal(r1.panoptic.segment_map, r2.panoptic.segment_map)
    for key in r1.trace:
        assert np.array_equal(r1.trace[key], r2.trace[key]), key

    # CLI end to end, byte level
    (tmp_path / "spec.json").write_text(json.dumps({
        "height": 64, "width": 64, "stuff_classes": ["sky", "grass"],
        "thing_classes": ["box", "ball", "wedge"], "n_shapes": 3, "n_templates": 3,
    }))
    base = [sys.executable, "-m", "eovseg.cli"]
    subprocess.run(base + ["gen", "--spec", str(tmp_path / "spec.json"), "--seed", "6",
                           "--out", str(tmp_path / "scene")], check=True, capture_output=True)
    for tag in ("x", "y"):
        subprocess.run(
            base + ["run", "--scene", str(tmp_path / "scene"),
                    "--weights", str(tmp_path / "w"),
                    "--trace", str(tmp_path / f"t{tag}"),
                    "--out", str(tmp_path / f"r{tag}.csv")],
            check=True, capture_output=True, timeout=300,
        )
    assert (tmp_path / "rx.csv").read_bytes() == (tmp_path / "ry.csv").read_bytes()
    tx = sorted((tmp_path / "tx").glob("*.eovt"))
    assert len(tx) == 13
    for p in tx:
        assert p.read_bytes() == (tmp_path / "ty" / p.name).read_bytes()
    report(6, "four fusion modes complete at defaults; trace replay bitwise; "
              "two CLI runs byte-identical (13 dumped stages)")


# criterion 7 -----------------------------------------------------------------


def test_criterion_7_bound_invariants_enforced_in_verify():
    names = [name for name, _ in CHECKS]
    for required in ("pipeline_bound_invariants", "vas_attention_bounds", "tdee_gate_range",
                     "softmax_properties"):
        assert required in names
    check_map = dict(CHECKS)
    for name in ("pipeline_bound_invariants", "vas_attention_bounds", "tdee_gate_range",
                 "softmax_properties"):
        passed, detail = check_map[name](Rng(7_000), 10)
        assert passed, f"{name}: {detail}"
    report(7, "attention weights in [1/N_class,1], gates in (0,1), softmax sums 1±1e-6, "
              "all asserted inside verify")


# criterion 8 -----------------------------------------------------------------


def test_criterion_8_tdee_symmetry_50_configs():
    rng = Rng(8_000)
    dims = [(8, 8), (8, 4), (16, 8), (16, 16), (32, 8)]
    for i in range(50):
        d, dd = dims[i % len(dims)]
        w = TdeeWeights.build(8_100 + i, d, dd)
        n = int(rng.integers(1, 7))
        em = rng.normal((n, d))
        es = rng.normal((n, d))
        assert np.array_equal(tdee(em, es, w), tdee(es, em, w.swapped())), f"config {i}"
        trace = tdee_detailed(em, es, w)
        assert trace.gate_m.min() > 0 and trace.gate_m.max() < 1
    report(8, "expert-swap output bitwise identical on 50 seeded configs")
