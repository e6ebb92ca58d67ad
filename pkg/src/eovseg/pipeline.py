"""End-to-end forward pass: features -> aggregation -> selection -> decoding ->
spatial branch -> fusion -> classification -> panoptic assembly.

Fusion modes plug in at two seams: ``eaf`` fuses the feature maps before
decoding; ``sdi``/``tdee`` fuse the embedding rows after decoding; ``none``
passes the mask embeddings straight through.  ``forward_traced`` additionally
dumps every named intermediate as an EOVT file, and ``replay_trace``
re-executes each stage from the dumps to confirm bitwise reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregator import aggregate, build_pyramid, extract_features
from .classifier import (
    ClassScores,
    EnsembleParams,
    MaskLabel,
    TextEmbeddings,
    classify,
    ensemble,
    in_vocab_scores,
    out_vocab_scores,
)
from .config import ModelConfig
from .decoder import MaskSet, decoder_forward
from .evaluation import PanopticAnnotation, assemble_panoptic
from .fusion import eaf, sdi, tdee
from .kernels import bilinear_upsample, conv2d_1x1
from .spatial import spatial_embeddings, spatial_features, vit_block_features
from .tensor import write_eovt
from .vas import vas_forward_detailed
from .weights import WeightBundle

# intermediates dumped by forward_traced for the default (tdee) configuration
TRACE_KEYS_TDEE = (
    "agg_features",
    "vs_agg_features",
    "vas_attention",
    "init_attention",
    "refined_kernels",
    "mask_logits",
    "mask_embeddings",
    "spatial_features",
    "spatial_embeddings",
    "instance_embeddings",
    "scores_in_vocab",
    "scores_out_vocab",
    "scores_final",
)


class PipelineStageError(RuntimeError):
    """Failure inside one pipeline stage, with the stage name attached."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


def pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Zero-pad the bottom/right spatial edges up to the next multiple."""
    _, h, w = image.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw))).astype(np.float32)


def resize_image(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Arbitrary-ratio bilinear resample with half-pixel centers (C,H,W)."""
    c, h, w = image.shape
    oh, ow = out_hw

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0).astype(np.float32)
        return lo, hi, frac

    ylo, yhi, fy = axis(h, oh)
    xlo, xhi, fx = axis(w, ow)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    ll = image[:, ylo, :][:, :, xlo]
    lh = image[:, ylo, :][:, :, xhi]
    hl = image[:, yhi, :][:, :, xlo]
    hh = image[:, yhi, :][:, :, xhi]
    top = ll + (lh - ll) * fx
    bot = hl + (hh - hl) * fx
    return (top + (bot - top) * fy).astype(np.float32)


def resize_map_nearest(seg_map: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample for id/class maps."""
    h, w = seg_map.shape
    oh, ow = out_hw
    ys = np.clip(np.rint((np.arange(oh) + 0.5) * (h / oh) - 0.5), 0, h - 1).astype(np.int64)
    xs = np.clip(np.rint((np.arange(ow) + 0.5) * (w / ow) - 0.5), 0, w - 1).astype(np.int64)
    return seg_map[ys][:, xs]


@dataclass
class ForwardResult:
    panoptic: PanopticAnnotation
    scores: ClassScores
    masks: MaskSet
    labels: list[MaskLabel]
    trace: dict[str, np.ndarray]


def _clip_final_features(image: np.ndarray, bundle: WeightBundle) -> np.ndarray:
    """Stand-in for the frozen-backbone final features used by out-of-vocab scoring:
    the deepest synthetic stage, projected to the embedding width, at stride 4."""
    feats = extract_features(image, bundle.backbone)
    w, b = bundle.clip_proj
    return bilinear_upsample(conv2d_1x1(feats[5], w, b), 8)


def forward(
    image: np.ndarray,
    text: TextEmbeddings,
    class_is_thing: np.ndarray,
    config: ModelConfig,
    bundle: WeightBundle,
) -> ForwardResult:
    trace: dict[str, np.ndarray] = {}

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PipelineStageError:
            raise
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc

    feats = stage("backbone", extract_features, image, bundle.backbone)
    pyramid = stage("aggregator", build_pyramid, feats, bundle.aggregator)
    agg = stage("aggregator", aggregate, pyramid, bundle.aggregator)
    trace["agg_features"] = agg

    vs_feat, attn = stage("vas", vas_forward_detailed, agg, text.embeddings, bundle.vas)
    trace["vs_agg_features"] = vs_feat
    trace["vas_attention"] = attn

    spatial_grid = None
    if config.fusion in ("eaf", "sdi", "tdee"):
        spatial_grid = stage("spatial", vit_block_features, image, bundle.vit)

    decoder_input = vs_feat
    if config.fusion == "eaf":
        grid_up = stage("fusion", bilinear_upsample, spatial_grid, 4)
        decoder_input = stage("fusion", eaf, vs_feat, grid_up, bundle.eaf)
        trace["early_fused_features"] = decoder_input

    dec = stage("decoder", decoder_forward, decoder_input, bundle.decoder, "dda")
    trace["mask_logits"] = dec.masks.logits
    trace["mask_embeddings"] = dec.mask_embeddings
    trace["refined_kernels"] = dec.kernels
    if dec.pooled is not None:
        trace["init_attention"] = dec.pooled

    if config.fusion in ("sdi", "tdee"):
        spat = stage("spatial", spatial_features, spatial_grid, bundle.upsampler)
        embed_s = stage("spatial", spatial_embeddings, spat, dec.masks)
        trace["spatial_features"] = spat
        trace["spatial_embeddings"] = embed_s
        if config.fusion == "tdee":
            instance = stage("fusion", tdee, dec.mask_embeddings, embed_s, bundle.tdee)
        else:
            instance = stage("fusion", sdi, dec.mask_embeddings, embed_s, bundle.sdi)
    else:
        instance = dec.mask_embeddings
    trace["instance_embeddings"] = instance

    s_in = stage("classifier", in_vocab_scores, instance, text, config.tau)
    clip_final = stage("classifier", _clip_final_features, image, bundle)
    s_out = stage("classifier", out_vocab_scores, clip_final, dec.masks, text, config.tau)
    params = EnsembleParams(alpha=config.alpha, beta=config.beta, method=config.ensemble_method)
    s_final = stage("classifier", ensemble, s_in, s_out, params, text.seen)
    trace["scores_in_vocab"] = s_in.values
    trace["scores_out_vocab"] = s_out.values
    trace["scores_final"] = s_final.values

    labels = stage("classifier", classify, dec.masks, s_final, config.score_floor)
    panoptic = stage("assembly", assemble_panoptic, dec.masks, labels, class_is_thing, 4)
    return ForwardResult(
        panoptic=panoptic, scores=s_final, masks=dec.masks, labels=labels, trace=trace
    )


def forward_traced(
    image: np.ndarray,
    text: TextEmbeddings,
    class_is_thing: np.ndarray,
    config: ModelConfig,
    bundle: WeightBundle,
    trace_dir: str | Path,
) -> ForwardResult:
    """Run forward and dump every intermediate tensor as <name>.eovt."""
    result = forward(image, text, class_is_thing, config, bundle)
    trace_dir = Path(trace_dir)
    trace_dir.mkdir(parents=True, exist_ok=True)
    for name in sorted(result.trace):
        write_eovt(trace_dir / f"{name}.eovt", result.trace[name])
    return result


def replay_trace(
    image: np.ndarray,
    text: TextEmbeddings,
    config: ModelConfig,
    bundle: WeightBundle,
    trace: dict[str, np.ndarray],
) -> list[str]:
    """Re-run every traced stage from its dumped inputs; list non-bitwise stages.

    Stages are replayed in isolation: each one consumes dumped upstream
    tensors (or scene inputs and weights) and its output must match the dump
    exactly.
    """
    failures: list[str] = []

    def check(name: str, produced: np.ndarray):
        if name not in trace:
            return
        if produced.shape != trace[name].shape or not np.array_equal(produced, trace[name]):
            failures.append(name)

    feats = extract_features(image, bundle.backbone)
    check("agg_features", aggregate(build_pyramid(feats, bundle.aggregator), bundle.aggregator))

    vs_feat, attn = vas_forward_detailed(trace["agg_features"], text.embeddings, bundle.vas)
    check("vs_agg_features", vs_feat)
    check("vas_attention", attn)

    decoder_input = trace["vs_agg_features"]
    if config.fusion == "eaf":
        grid = vit_block_features(image, bundle.vit)
        check("early_fused_features", eaf(decoder_input, bilinear_upsample(grid, 4), bundle.eaf))
        decoder_input = trace["early_fused_features"]

    dec = decoder_forward(decoder_input, bundle.decoder, "dda")
    check("mask_logits", dec.masks.logits)
    check("mask_embeddings", dec.mask_embeddings)
    check("refined_kernels", dec.kernels)
    if dec.pooled is not None:
        check("init_attention", dec.pooled)

    masks = MaskSet(logits=trace["mask_logits"])
    if config.fusion in ("sdi", "tdee"):
        spat = spatial_features(vit_block_features(image, bundle.vit), bundle.upsampler)
        check("spatial_features", spat)
        embed_s = spatial_embeddings(trace["spatial_features"], masks)
        check("spatial_embeddings", embed_s)
        fuse_fn = tdee if config.fusion == "tdee" else sdi
        fuse_w = bundle.tdee if config.fusion == "tdee" else bundle.sdi
        check(
            "instance_embeddings",
            fuse_fn(trace["mask_embeddings"], trace["spatial_embeddings"], fuse_w),
        )
    else:
        check("instance_embeddings", trace["mask_embeddings"])

    check("scores_in_vocab", in_vocab_scores(trace["instance_embeddings"], text, config.tau).values)
    clip_final = _clip_final_features(image, bundle)
    check("scores_out_vocab", out_vocab_scores(clip_final, masks, text, config.tau).values)
    params = EnsembleParams(alpha=config.alpha, beta=config.beta, method=config.ensemble_method)
    check(
        "scores_final",
        ensemble(
            ClassScores(values=trace["scores_in_vocab"], kind="in_vocab"),
            ClassScores(values=trace["scores_out_vocab"], kind="out_vocab"),
            params,
            text.seen,
        ).values,
    )
    return failures
