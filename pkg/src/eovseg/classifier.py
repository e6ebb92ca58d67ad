"""Open-vocabulary classification of mask embeddings.

Text templates are averaged and L2-normalized per class; mask embeddings are
scored by temperature softmax over cosine similarities.  In-vocabulary and
out-of-vocabulary score matrices are blended with a geometric or arithmetic
ensemble using separate exponents/weights for seen and unseen classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import MaskSet, mask_pool
from .kernels import l2_normalize, softmax


@dataclass
class TextEmbeddings:
    embeddings: np.ndarray  # (N_class, D), unit rows
    class_names: list[str]
    seen: np.ndarray  # (N_class,) bool, True for training-vocabulary classes

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if n < 1:
            raise ValueError("TextEmbeddings: at least one class required")
        if len(self.class_names) != n or self.seen.shape != (n,):
            raise ValueError("TextEmbeddings: names/seen-mask length mismatch")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ValueError("TextEmbeddings: rows must be unit-norm")

    @property
    def n_classes(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class ClassScores:
    values: np.ndarray  # (N_mask, N_class)
    kind: str  # in_vocab | out_vocab | ensembled


@dataclass
class EnsembleParams:
    alpha: float = 0.4  # blend factor for seen classes
    beta: float = 0.8  # blend factor for unseen classes
    method: str = "geometric"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"EnsembleParams: alpha {self.alpha} outside [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"EnsembleParams: beta {self.beta} outside [0, 1]")
        if self.method not in ("geometric", "arithmetic"):
            raise ValueError(f"EnsembleParams: unknown method {self.method!r}")


def build_text_embeddings(
    templates: np.ndarray, class_names: list[str], seen: np.ndarray
) -> TextEmbeddings:
    """Average the (M, N_class, D) template embeddings per class and normalize rows."""
    if templates.ndim != 3 or templates.shape[0] < 1:
        raise ValueError(f"build_text_embeddings: need (M, N_class, D), got {templates.shape}")
    mean = np.mean(templates.astype(np.float64), axis=0)
    norms = np.linalg.norm(mean, axis=1)
    dead = np.nonzero(norms < 1e-10)[0]
    if dead.size:
        raise ValueError(
            f"build_text_embeddings: class {int(dead[0])} averages to a zero vector"
        )
    embeddings = l2_normalize(mean.astype(np.float32), axis=1)
    return TextEmbeddings(embeddings=embeddings, class_names=list(class_names), seen=seen)


def in_vocab_scores(
    instance_embed: np.ndarray, text: TextEmbeddings, tau: float
) -> ClassScores:
    """Cosine similarity against the class embeddings, softmaxed at temperature tau."""
    if tau <= 0:
        raise ValueError(f"in_vocab_scores: temperature must be positive, got {tau}")
    unit = l2_normalize(instance_embed, axis=1)
    logits = (unit @ text.embeddings.T) / np.float32(tau)
    return ClassScores(values=softmax(logits.astype(np.float32), axis=1), kind="in_vocab")


def out_vocab_scores(
    clip_features: np.ndarray, masks: MaskSet, text: TextEmbeddings, tau: float
) -> ClassScores:
    """Pool the backbone's final features under each mask, then score as above."""
    class_embed = mask_pool(clip_features, masks)
    scores = in_vocab_scores(class_embed, text, tau)
    return ClassScores(values=scores.values, kind="out_vocab")


def ensemble(
    s_in: ClassScores, s_out: ClassScores, params: EnsembleParams, seen: np.ndarray
) -> ClassScores:
    """Blend score matrices column-wise; seen classes use alpha, unseen beta.

    geometric: in^(1-w) * out^w.  arithmetic: (1-w)*in + w*out.  Weights 0 and
    1 short-circuit to an exact copy of the corresponding input column, so the
    degenerate settings are bitwise-faithful.  Ensembled rows are not
    renormalized; only the per-row argmax is contractual downstream.
    """
    a, b = s_in.values, s_out.values
    if a.shape != b.shape:
        raise ValueError(f"ensemble: score shapes differ, {a.shape} vs {b.shape}")
    if seen.shape != (a.shape[1],):
        raise ValueError(f"ensemble: seen mask shape {seen.shape} != ({a.shape[1]},)")
    if params.method == "geometric" and (np.any(a <= 0) or np.any(b <= 0)):
        raise ValueError("ensemble: geometric method requires strictly positive scores")
    out = np.empty_like(a)
    for j in range(a.shape[1]):
        w = params.alpha if seen[j] else params.beta
        if w == 0.0:
            out[:, j] = a[:, j]
        elif w == 1.0:
            out[:, j] = b[:, j]
        elif params.method == "geometric":
            out[:, j] = a[:, j] ** np.float32(1.0 - w) * b[:, j] ** np.float32(w)
        else:
            out[:, j] = np.float32(1.0 - w) * a[:, j] + np.float32(w) * b[:, j]
    return ClassScores(values=out, kind="ensembled")


@dataclass
class MaskLabel:
    mask_index: int
    class_id: int
    confidence: float


def classify(masks: MaskSet, scores: ClassScores, score_floor: float) -> list[MaskLabel]:
    """Argmax class per mask; masks under the confidence floor are dropped.

    Ties resolve to the lowest class index (argmax's first-hit rule).
    """
    if scores.values.shape[0] != masks.n_queries:
        raise ValueError(
            f"classify: {scores.values.shape[0]} score rows for {masks.n_queries} masks"
        )
    labels = []
    for i in range(masks.n_queries):
        j = int(np.argmax(scores.values[i]))
        conf = float(scores.values[i, j])
        if conf < score_floor:
            continue
        labels.append(MaskLabel(mask_index=i, class_id=j, confidence=conf))
    return labels
