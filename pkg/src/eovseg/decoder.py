"""Lightweight query decoder.

Per layer: pool features under the current masks (initial attention), refine
the object kernels with dynamic depthwise attention (or the cross-attention
baseline kept for profiling), run self-attention + FFN over the queries, map
to mask kernels with a 3-layer MLP, and predict new mask logits.  Mask
embeddings come from normalized soft mask pooling at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    depthwise_conv1d,
    layer_norm,
    linear,
    multi_head_attention,
    relu,
    sigmoid,
)
from .tensor import Rng

MASK_POOL_EPS = 1e-8


@dataclass
class MaskSet:
    """Query mask logits on the stride-4 grid; probabilities are sigmoid(logits)."""

    logits: np.ndarray  # (N, H', W')

    @property
    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits)

    @property
    def n_queries(self) -> int:
        return self.logits.shape[0]


@dataclass
class AttentionBlockWeights:
    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def build(cls, rng: Rng, width: int, heads: int) -> "AttentionBlockWeights":
        std = 1.0 / np.sqrt(width)
        return cls(
            heads=heads,
            wq=rng.normal((width, width), std=std),
            wk=rng.normal((width, width), std=std),
            wv=rng.normal((width, width), std=std),
            wo=rng.normal((width, width), std=std),
        )

    @property
    def param_count(self) -> int:
        return self.wq.size + self.wk.size + self.wv.size + self.wo.size


@dataclass
class DecoderLayerWeights:
    kernel_proj: np.ndarray  # (D, m), bias-free; generates the per-query 1-D kernels
    cross_attn: AttentionBlockWeights  # baseline interaction, profiling only
    self_attn: AttentionBlockWeights
    ln_attn: tuple[np.ndarray, np.ndarray]  # pre-norm before self-attention
    ln_ffn: tuple[np.ndarray, np.ndarray]  # pre-norm before the FFN
    ffn_w1: np.ndarray  # (D, 4D)
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray  # (4D, D)
    ffn_b2: np.ndarray


@dataclass
class DecoderWeights:
    layers: list[DecoderLayerWeights]
    mask_mlp: list[tuple[np.ndarray, np.ndarray]]  # three (w, b) pairs, D->D->D->D
    init_kernels: np.ndarray  # (N, D)
    kernel_size: int = 3  # m, odd

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError(f"DecoderWeights: kernel size must be odd, got {self.kernel_size}")
        if not self.layers:
            raise ValueError("DecoderWeights: at least one layer required")

    @classmethod
    def build(
        cls,
        seed: int,
        width: int,
        n_queries: int,
        n_layers: int,
        kernel_size: int = 3,
        heads: int = 8,
        ffn_expansion: int = 4,
    ) -> "DecoderWeights":
        rng = Rng(seed)
        hidden = width * ffn_expansion
        layers = []
        for _ in range(n_layers):
            layers.append(
                DecoderLayerWeights(
                    kernel_proj=rng.normal((width, kernel_size), std=1.0 / np.sqrt(width)),
                    cross_attn=AttentionBlockWeights.build(rng, width, heads),
                    self_attn=AttentionBlockWeights.build(rng, width, heads),
                    ln_attn=(np.ones(width, dtype=np.float32), np.zeros(width, dtype=np.float32)),
                    ln_ffn=(np.ones(width, dtype=np.float32), np.zeros(width, dtype=np.float32)),
                    ffn_w1=rng.normal((width, hidden), std=1.0 / np.sqrt(width)),
                    ffn_b1=np.zeros(hidden, dtype=np.float32),
                    ffn_w2=rng.normal((hidden, width), std=1.0 / np.sqrt(hidden)),
                    ffn_b2=np.zeros(width, dtype=np.float32),
                )
            )
        mask_mlp = [
            (rng.normal((width, width), std=1.0 / np.sqrt(width)), np.zeros(width, dtype=np.float32))
            for _ in range(3)
        ]
        init_kernels = rng.normal((n_queries, width), std=0.1)
        return cls(layers=layers, mask_mlp=mask_mlp, init_kernels=init_kernels, kernel_size=kernel_size)


# ---------------------------------------------------------------------------
# per-layer operations


def initial_attention(features: np.ndarray, masks: MaskSet) -> np.ndarray:
    """Unnormalized dot product of features with sigmoid mask probabilities.

    features: (D, H', W'); returns (N, D).
    """
    d = features.shape[0]
    if features.shape[1:] != masks.logits.shape[1:]:
        raise ValueError(
            f"initial_attention: feature grid {features.shape[1:]} != mask grid "
            f"{masks.logits.shape[1:]}"
        )
    probs = masks.probabilities.reshape(masks.n_queries, -1)
    return (probs @ features.reshape(d, -1).T).astype(np.float32, copy=False)


def dda(kernels: np.ndarray, pooled: np.ndarray, kernel_proj: np.ndarray) -> np.ndarray:
    """Dynamic depthwise attention: per-query generated 1-D kernels convolve pooled rows.

    kernels: (N, D) object kernels; pooled: (N, D); kernel_proj: (D, m), m odd.
    """
    m = kernel_proj.shape[1]
    if m % 2 == 0:
        raise ValueError(f"dda: generated kernel length must be odd, got {m}")
    generated = linear(kernels, kernel_proj)  # (N, m)
    return depthwise_conv1d(pooled, generated)


def cross_attention_baseline(
    kernels: np.ndarray, features: np.ndarray, w: AttentionBlockWeights
) -> np.ndarray:
    """Queries attend over every spatial position of the (single-scale) feature map."""
    d = features.shape[0]
    positions = np.ascontiguousarray(features.reshape(d, -1).T)  # (H'W', D)
    return kernels + multi_head_attention(
        kernels, positions, w.wq, w.wk, w.wv, w.wo, w.heads
    )


def refine_kernels(kernels: np.ndarray, layer: DecoderLayerWeights) -> np.ndarray:
    """Pre-norm self-attention over the queries, then a pre-norm FFN, both residual."""
    g1, b1 = layer.ln_attn
    attn_in = layer_norm(kernels, g1, b1)
    x = kernels + multi_head_attention(
        attn_in,
        attn_in,
        layer.self_attn.wq,
        layer.self_attn.wk,
        layer.self_attn.wv,
        layer.self_attn.wo,
        layer.self_attn.heads,
    )
    g2, b2 = layer.ln_ffn
    ffn_in = layer_norm(x, g2, b2)
    hidden = relu(linear(ffn_in, layer.ffn_w1, layer.ffn_b1))
    return x + linear(hidden, layer.ffn_w2, layer.ffn_b2)


def mask_kernels(kernels: np.ndarray, mlp: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Three-layer MLP, relu between layers, linear last layer."""
    x = kernels
    for i, (w, b) in enumerate(mlp):
        x = linear(x, w, b)
        if i < len(mlp) - 1:
            x = relu(x)
    return x


def predict_masks(kernels: np.ndarray, features: np.ndarray) -> MaskSet:
    """Mask logits as the dot product of each kernel with every feature column."""
    d, h, w = features.shape
    if kernels.shape[1] != d:
        raise ValueError(f"predict_masks: kernel width {kernels.shape[1]} != feature width {d}")
    logits = kernels @ features.reshape(d, -1)
    return MaskSet(logits=logits.reshape(kernels.shape[0], h, w).astype(np.float32, copy=False))


def mask_pool(features: np.ndarray, masks: MaskSet) -> np.ndarray:
    """Probability-weighted spatial average of features under each mask.

    features: (D, H', W'); returns (N, D).
    """
    d = features.shape[0]
    if features.shape[1:] != masks.logits.shape[1:]:
        raise ValueError(
            f"mask_pool: feature grid {features.shape[1:]} != mask grid {masks.logits.shape[1:]}"
        )
    probs = masks.probabilities.reshape(masks.n_queries, -1)
    weighted = probs @ features.reshape(d, -1).T
    area = np.sum(probs, axis=1, keepdims=True) + np.float32(MASK_POOL_EPS)
    return (weighted / area).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# full forward


@dataclass
class DecoderOutput:
    masks: MaskSet
    mask_embeddings: np.ndarray  # (N, D)
    kernels: np.ndarray  # refined object kernels after the last layer
    pooled: np.ndarray | None  # last layer's pooled query features (dda mode only)
    layer_masks: list[MaskSet] = field(default_factory=list)


def decoder_forward(
    features: np.ndarray,
    weights: DecoderWeights,
    mode: str = "dda",
) -> DecoderOutput:
    """Run every decoder layer in the given interaction mode ("dda" or "ca").

    In dda mode each layer pools features under the current masks and the
    generated kernels convolve the pooled rows; in ca mode the queries attend
    over the raw feature positions instead (the pooling step is skipped, as
    cross-attention replaces that interaction for the profiled baseline).
    """
    if mode not in ("dda", "ca"):
        raise ValueError(f"decoder_forward: unknown mode {mode!r}")
    kernels = weights.init_kernels
    masks = predict_masks(kernels, features)
    layer_masks = []
    pooled = None
    for layer in weights.layers:
        if mode == "dda":
            pooled = initial_attention(features, masks)
            interacted = dda(kernels, pooled, layer.kernel_proj)
        else:
            interacted = cross_attention_baseline(kernels, features, layer.cross_attn)
        kernels = refine_kernels(interacted, layer)
        masks = predict_masks(mask_kernels(kernels, weights.mask_mlp), features)
        layer_masks.append(masks)
    embeddings = mask_pool(features, masks)
    return DecoderOutput(
        masks=masks,
        mask_embeddings=embeddings,
        kernels=kernels,
        pooled=pooled,
        layer_masks=layer_masks,
    )
