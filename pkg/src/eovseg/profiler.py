"""Analytic parameter/MAC accounting and a wall-time benchmark harness.

MAC convention (shared with the instrumented oracle counters): one MAC per
data*data or data*weight product inside a contraction, convolution, or
interpolation, with zero padding included; elementwise gates, normalizations,
activations, and plain averaging are not counted.  FLOPs are reported as
2 * MACs; every CSV states this in its header comment.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .decoder import (
    MaskSet,
    cross_attention_baseline,
    dda,
    initial_attention,
    mask_kernels,
    predict_masks,
    refine_kernels,
)
from .tensor import Rng
from .weights import WeightBundle, read_manifest

MODULES = (
    "backbone",
    "aggregator",
    "vas",
    "decoder",
    "spatial",
    "fusion",
    "text_encoder",
    "classifier",
)

FLOPS_NOTE = "flops = 2 * macs (multiply-accumulate convention)"


# ---------------------------------------------------------------------------
# op-level closed forms (each mirrored by an instrumented oracle)


def macs_conv2d_1x1(c_in: int, c_out: int, h: int, w: int) -> int:
    return c_in * c_out * h * w


def macs_conv2d_3x3(c_in: int, c_out: int, h: int, w: int) -> int:
    return c_in * c_out * h * w * 9


def macs_depthwise_3x3(c: int, h: int, w: int) -> int:
    return c * h * w * 9


def macs_depthwise_separable(c_in: int, c_out: int, h: int, w: int) -> int:
    return macs_depthwise_3x3(c_in, h, w) + macs_conv2d_1x1(c_in, c_out, h, w)


def macs_depthwise_conv1d(n: int, d: int, m: int) -> int:
    return n * d * m


def macs_transposed_conv2d(c_in: int, c_out: int, h_in: int, w_in: int) -> int:
    return c_in * c_out * h_in * w_in * 4


def macs_bilinear(c: int, h_out: int, w_out: int) -> int:
    return c * h_out * w_out * 4


def macs_matmul(n: int, k: int, m: int) -> int:
    return n * k * m


def macs_attention(n_q: int, n_kv: int, d: int) -> int:
    """Four projections plus the QK and AV contractions (any head count)."""
    return 2 * n_q * d * d + 2 * n_kv * d * d + 2 * n_q * n_kv * d


def macs_dda(n: int, d: int, m: int) -> int:
    """The dynamic depthwise attention itself: one m-tap conv per query row."""
    return macs_depthwise_conv1d(n, d, m)


def macs_dda_kernel_gen(n: int, d: int, m: int) -> int:
    return macs_matmul(n, d, m)


def macs_initial_attention(n: int, d: int, hw: int) -> int:
    return n * d * hw


def macs_cross_attention(n: int, d: int, hw: int) -> int:
    return macs_attention(n, hw, d)


def params_dda_layer(d: int, m: int) -> int:
    """The bias-free kernel-generating projection."""
    return d * m


def params_ca_layer(d: int) -> int:
    """Four bias-free projection matrices."""
    return 4 * d * d


# ---------------------------------------------------------------------------
# module-level accounting


def count_params(weights_dir: str | Path) -> dict[str, int]:
    """Exact per-module element counts from a serialized bundle's manifest."""
    entries = read_manifest(weights_dir)
    counts = {m: 0 for m in MODULES}
    for name, shape in entries.items():
        module = name.split(".", 1)[0]
        if module not in counts:
            raise ValueError(f"count_params: tensor {name!r} has unknown module prefix")
        n = 1
        for e in shape:
            n *= e
        counts[module] += n
    return counts


def _decoder_macs(cfg: ModelConfig, hw: int, mode: str) -> int:
    n, d, m = cfg.n_queries, cfg.embed_dim, cfg.dda_kernel_size
    per_layer = 0
    if mode == "dda":
        per_layer += macs_initial_attention(n, d, hw)
        per_layer += macs_dda_kernel_gen(n, d, m) + macs_dda(n, d, m)
    else:
        per_layer += macs_cross_attention(n, d, hw)
    per_layer += macs_attention(n, n, d)  # query self-attention
    per_layer += 2 * n * d * (cfg.ffn_expansion * d)  # FFN in and out
    per_layer += 3 * macs_matmul(n, d, d)  # mask-kernel MLP
    per_layer += macs_matmul(n, d, hw)  # mask prediction
    total = cfg.decoder_layers * per_layer
    total += macs_matmul(n, d, hw)  # initial mask prediction from the learnable kernels
    total += n * d * hw  # final mask-embedding pooling
    return total


def count_macs(
    cfg: ModelConfig,
    image_hw: tuple[int, int] = (64, 64),
    n_class: int = 4,
    mode: str = "dda",
) -> dict[str, int]:
    """Per-module analytic MAC counts for one forward pass."""
    h, w = image_hw
    d, dv = cfg.embed_dim, cfg.vit_dim
    h4, w4 = h // 4, w // 4
    hw4 = h4 * w4
    n = cfg.n_queries
    widths = cfg.backbone_widths
    counts = dict.fromkeys(MODULES, 0)

    sizes = {2: (h // 4, w // 4), 3: (h // 8, w // 8), 4: (h // 16, w // 16), 5: (h // 32, w // 32)}
    in_ch = 3
    for level, width in zip((2, 3, 4, 5), widths):
        factor = 4 if level == 2 else 2
        hh, ww = sizes[level]
        counts["backbone"] += macs_conv2d_1x1(in_ch * factor * factor, width, hh, ww)
        in_ch = width

    for level, c_in in zip((2, 3, 4, 5), widths):
        hh, ww = sizes[level]
        counts["aggregator"] += macs_conv2d_1x1(c_in, d, hh, ww)  # lateral
        counts["aggregator"] += macs_conv2d_3x3(d, d, hh, ww)  # smoothing
        counts["aggregator"] += macs_conv2d_1x1(d, d, hh, ww)  # pre-sum projection
    for level in (2, 3, 4):  # top-down upsample-and-add targets
        hh, ww = sizes[level]
        counts["aggregator"] += macs_bilinear(d, hh, ww)
    for level in (3, 4, 5):  # aggregation upsampling to stride 4
        counts["aggregator"] += macs_bilinear(d, h4, w4)
    counts["aggregator"] += macs_conv2d_3x3(d, d, h4, w4)  # fuse

    counts["vas"] += macs_depthwise_separable(d, d, h4, w4)
    counts["vas"] += macs_matmul(n_class, d, d)
    counts["vas"] += d * hw4 * n_class  # head-wise channel contraction

    counts["decoder"] = _decoder_macs(cfg, hw4, mode)

    gh, gw = h // 16, w // 16
    tokens = gh * gw + 1
    counts["spatial"] += macs_matmul(gh * gw, 3 * 256, dv)  # patch embedding
    counts["spatial"] += macs_attention(tokens, tokens, dv)
    counts["spatial"] += 2 * tokens * dv * (4 * dv)  # MLP
    if cfg.fusion in ("sdi", "tdee"):
        counts["spatial"] += macs_transposed_conv2d(dv, dv, gh, gw)
        counts["spatial"] += macs_transposed_conv2d(dv, d, 2 * gh, 2 * gw)
        counts["spatial"] += n * d * hw4  # spatial mask pooling

    if cfg.fusion == "tdee":
        half = cfg.tdee_dim // 2
        counts["fusion"] += 2 * macs_matmul(n, d, cfg.tdee_dim)
        counts["fusion"] += 2 * macs_matmul(n, half, half)
        counts["fusion"] += macs_matmul(n, half, d)
    elif cfg.fusion == "sdi":
        k, r = cfg.sdi_kernel_size, cfg.sdi_rank
        counts["fusion"] += macs_matmul(n, d, k) + 2 * macs_matmul(n, d, d * r)
        counts["fusion"] += macs_depthwise_conv1d(n, d, k)
        counts["fusion"] += 2 * n * d * r  # rank-r pointwise application
    elif cfg.fusion == "eaf":
        counts["fusion"] += macs_bilinear(dv, h4, w4)
        counts["fusion"] += macs_conv2d_1x1(d + dv, d, h4, w4)

    counts["text_encoder"] = 0  # template averaging is adds only under this convention

    h32, w32 = sizes[5]
    counts["classifier"] += macs_conv2d_1x1(widths[-1], d, h32, w32)  # final-stage projection
    counts["classifier"] += macs_bilinear(d, h4, w4)
    counts["classifier"] += n * d * hw4  # out-of-vocab mask pooling
    counts["classifier"] += 2 * macs_matmul(n, d, n_class)  # both cosine score matrices
    return counts


# ---------------------------------------------------------------------------
# reports


@dataclass
class ProfileRow:
    module: str
    params: int
    macs: int
    mode: str
    time_mean_ns: float = 0.0
    time_p50_ns: float = 0.0
    time_p95_ns: float = 0.0

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass
class ProfileReport:
    rows: list[ProfileRow]
    config_hash: str
    notes: list[str] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# {FLOPS_NOTE}\n")
            for note in self.notes:
                f.write(f"# {note}\n")
            writer = csv.writer(f)
            writer.writerow(
                [
                    "module",
                    "params",
                    "macs",
                    "flops",
                    "time_mean_ns",
                    "time_p50_ns",
                    "time_p95_ns",
                    "mode",
                    "config_hash",
                ]
            )
            for r in self.rows:
                writer.writerow(
                    [
                        r.module,
                        r.params,
                        r.macs,
                        r.flops,
                        f"{r.time_mean_ns:.0f}",
                        f"{r.time_p50_ns:.0f}",
                        f"{r.time_p95_ns:.0f}",
                        r.mode,
                        self.config_hash,
                    ]
                )


def assert_interaction_asymmetry(cfg: ModelConfig) -> None:
    """The motivating cost asymmetry: the dynamic kernel projection must be
    strictly smaller than the four cross-attention projections."""
    d, m = cfg.embed_dim, cfg.dda_kernel_size
    if params_dda_layer(d, m) >= params_ca_layer(d):
        raise ValueError(
            f"interaction asymmetry violated: dda layer {params_dda_layer(d, m)} params "
            f">= ca layer {params_ca_layer(d)} (kernel size {m} too large for width {d})"
        )


def profile_modules(
    cfg: ModelConfig,
    weights_dir: str | Path,
    image_hw: tuple[int, int] = (64, 64),
    n_class: int = 4,
    mode: str = "dda",
) -> ProfileReport:
    assert_interaction_asymmetry(cfg)
    params = count_params(weights_dir)
    macs = count_macs(cfg, image_hw, n_class, mode)
    rows = [ProfileRow(module=m, params=params[m], macs=macs[m], mode=mode) for m in MODULES]
    rows.append(
        ProfileRow(
            module="total",
            params=sum(params.values()),
            macs=sum(macs.values()),
            mode=mode,
        )
    )
    return ProfileReport(
        rows=rows, config_hash=cfg.hash({"image_hw": list(image_hw), "n_class": n_class})
    )


def _layer_step(features, kernels, masks, bundle: WeightBundle, mode: str):
    layer = bundle.decoder.layers[0]
    if mode == "dda":
        pooled = initial_attention(features, masks)
        interacted = dda(kernels, pooled, layer.kernel_proj)
    else:
        interacted = cross_attention_baseline(kernels, features, layer.cross_attn)
    refined = refine_kernels(interacted, layer)
    return predict_masks(mask_kernels(refined, bundle.decoder.mask_mlp), features)


def benchmark(
    cfg: ModelConfig,
    bundle: WeightBundle,
    mode: str,
    reps: int,
    image_hw: tuple[int, int] = (64, 64),
    warmup: int = 2,
    seed: int = 0,
) -> ProfileReport:
    """Time one decoder layer on seeded inputs; counts stay analytic."""
    if reps < 5:
        raise ValueError(f"benchmark: reps must be >= 5, got {reps}")
    if mode not in ("dda", "ca"):
        raise ValueError(f"benchmark: unknown mode {mode!r}")
    assert_interaction_asymmetry(cfg)
    h4, w4 = image_hw[0] // 4, image_hw[1] // 4
    rng = Rng(seed)
    features = rng.normal((cfg.embed_dim, h4, w4))
    kernels = rng.normal((cfg.n_queries, cfg.embed_dim), std=0.1)
    masks = MaskSet(logits=rng.normal((cfg.n_queries, h4, w4)))

    for _ in range(warmup):
        _layer_step(features, kernels, masks, bundle, mode)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        _layer_step(features, kernels, masks, bundle, mode)
        times.append(time.perf_counter_ns() - t0)

    n, d, m = cfg.n_queries, cfg.embed_dim, cfg.dda_kernel_size
    hw = h4 * w4
    if mode == "dda":
        interaction_params = params_dda_layer(d, m)
        interaction_macs = macs_initial_attention(n, d, hw) + macs_dda_kernel_gen(n, d, m) + macs_dda(n, d, m)
    else:
        interaction_params = params_ca_layer(d)
        interaction_macs = macs_cross_attention(n, d, hw)
    layer_macs = (
        interaction_macs
        + macs_attention(n, n, d)
        + 2 * n * d * (cfg.ffn_expansion * d)
        + 3 * macs_matmul(n, d, d)
        + macs_matmul(n, d, hw)
    )
    row = ProfileRow(
        module="decoder_layer",
        params=interaction_params,
        macs=layer_macs,
        mode=mode,
        time_mean_ns=float(statistics.fmean(times)),
        time_p50_ns=float(np.percentile(times, 50)),
        time_p95_ns=float(np.percentile(times, 95)),
    )
    report = ProfileReport(
        rows=[row],
        config_hash=cfg.hash({"image_hw": list(image_hw)}),
        notes=[
            f"reps={reps} warmup={warmup} (warmup excluded), monotonic clock",
            "params column reports the interaction block only (kernel projection vs QKVO)",
        ],
    )
    return report
