"""Vocabulary-aware selection: text-guided multi-head reweighting of features.

The feature side goes through a depthwise-separable conv, the text side
through a linear layer; both are split into heads, contracted over channels,
softmaxed over the vocabulary, and reduced with a max.  The resulting
per-head weight map (scaled and offset) multiplies the projected features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import conv2d_depthwise_separable, contract, linear
from .tensor import Rng


@dataclass
class VasWeights:
    feat_depth: np.ndarray  # (D, 3, 3) per-channel 3x3
    feat_point: np.ndarray  # (D, D) pointwise mix
    feat_bias: np.ndarray  # (D,)
    text_w: np.ndarray  # (D, D) row-vector linear
    text_b: np.ndarray  # (D,)
    heads: int
    scale: float  # multiplies the attention weights
    offset: float  # added to the scaled attention weights

    def __post_init__(self):
        d = self.feat_point.shape[0]
        if d % self.heads != 0:
            raise ValueError(f"VasWeights: width {d} not divisible by {self.heads} heads")

    @classmethod
    def build(cls, seed: int, width: int, heads: int, scale: float = 1.0, offset: float = 0.0):
        rng = Rng(seed)
        return cls(
            feat_depth=rng.normal((width, 3, 3), std=1.0 / 3.0),
            feat_point=rng.normal((width, width), std=1.0 / np.sqrt(width)),
            feat_bias=rng.normal((width,), std=0.02),
            text_w=rng.normal((width, width), std=1.0 / np.sqrt(width)),
            text_b=rng.normal((width,), std=0.02),
            heads=heads,
            scale=float(scale),
            offset=float(offset),
        )


def project_features(feat: np.ndarray, w: VasWeights) -> np.ndarray:
    """Depthwise-separable projection of the aggregated features (D,H,W)->(D,H,W)."""
    return conv2d_depthwise_separable(feat, w.feat_depth, w.feat_point, w.feat_bias)


def _max_of_softmax(logits: np.ndarray) -> np.ndarray:
    """Max over the last axis of its softmax: 1 / sum(exp(x - max(x))).

    The denominator is accumulated in ascending value order, a canonical
    order independent of how the vocabulary rows were arranged, so the result
    is bitwise invariant under class permutations.
    """
    if not np.all(np.isfinite(logits)):
        raise ValueError("vas_attention: non-finite similarity logits")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    denom = np.sum(np.sort(np.exp(shifted), axis=-1), axis=-1)
    return (np.float32(1.0) / denom).astype(np.float32, copy=False)


def _attention_from_projected(
    feat_proj: np.ndarray, text_embed: np.ndarray, w: VasWeights
) -> np.ndarray:
    d, h, wd = feat_proj.shape
    n_class = text_embed.shape[0]
    if n_class < 1:
        raise ValueError("vas_attention: vocabulary must contain at least one class")
    if d % w.heads != 0:
        raise ValueError(f"vas_attention: width {d} not divisible by {w.heads} heads")
    per_head = d // w.heads
    text_proj = linear(text_embed, w.text_w, w.text_b)
    mh_feat = feat_proj.reshape(1, w.heads, per_head, h, wd)
    mh_text = text_proj.reshape(1, n_class, w.heads, per_head)
    logits = contract(mh_feat, mh_text, "bmchw,bnmc->bmhwn")
    return _max_of_softmax(logits)[0]  # (heads, H, W)


def vas_attention(feat: np.ndarray, text_embed: np.ndarray, w: VasWeights) -> np.ndarray:
    """Vocabulary-aware attention weights, one map per head, each in [1/N_class, 1]."""
    return _attention_from_projected(project_features(feat, w), text_embed, w)


def vas_apply(
    feat_proj: np.ndarray, attn: np.ndarray, scale: float, offset: float
) -> np.ndarray:
    """Broadcast (scale*attn + offset) over each head's channel block of feat_proj."""
    d, h, wd = feat_proj.shape
    heads = attn.shape[0]
    if d % heads != 0 or attn.shape[1:] != (h, wd):
        raise ValueError(
            f"vas_apply: attention {attn.shape} incompatible with features {feat_proj.shape}"
        )
    gate = np.float32(scale) * attn + np.float32(offset)
    mh = feat_proj.reshape(heads, d // heads, h, wd)
    out = gate[:, None, :, :] * mh
    return np.ascontiguousarray(out.reshape(d, h, wd))


def vas_forward_detailed(
    feat: np.ndarray, text_embed: np.ndarray, w: VasWeights
) -> tuple[np.ndarray, np.ndarray]:
    """Selection pass returning (weighted features, attention weights)."""
    feat_proj = project_features(feat, w)
    attn = _attention_from_projected(feat_proj, text_embed, w)
    return vas_apply(feat_proj, attn, w.scale, w.offset), attn


def vas_forward(feat: np.ndarray, text_embed: np.ndarray, w: VasWeights) -> np.ndarray:
    """Full selection pass; bitwise equal to vas_apply(vas_attention(...))."""
    return vas_forward_detailed(feat, text_embed, w)[0]
