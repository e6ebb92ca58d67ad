"""Vectorized float32 compute kernels.

Every kernel here is paired with a pure-Python loop oracle in
:mod:`eovseg.oracles`; the `verify` command and the test suite check the pair
against each other on seeded random inputs.

Conventions fixed once for the whole package:
  * convolutions use the correlation convention (no kernel flip);
  * bilinear interpolation uses half-pixel centers (align_corners=false);
  * gelu is the tanh approximation;
  * reductions run in row-major order so results are bitwise reproducible.
"""

from __future__ import annotations

import math

import numpy as np

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# labeled contraction


def _parse_contract_spec(spec: str):
    if "->" not in spec:
        raise ValueError(f"contract spec {spec!r}: missing '->'")
    lhs, out = spec.split("->")
    parts = lhs.split(",")
    if len(parts) != 2:
        raise ValueError(f"contract spec {spec!r}: exactly two operands required")
    a_labels, b_labels = parts
    for labels in (a_labels, b_labels, out):
        if len(set(labels)) != len(labels):
            raise ValueError(f"contract spec {spec!r}: repeated label in {labels!r}")
    known = set(a_labels) | set(b_labels)
    for lab in out:
        if lab not in known:
            raise ValueError(f"contract spec {spec!r}: output label {lab!r} not in inputs")
    return a_labels, b_labels, out


def contract(a: np.ndarray, b: np.ndarray, spec: str) -> np.ndarray:
    """Einstein-style two-operand contraction, e.g. ``"bmchw,bnmc->bmhwn"``."""
    a_labels, b_labels, out_labels = _parse_contract_spec(spec)
    if a.ndim != len(a_labels):
        raise ValueError(
            f"contract {spec!r}: first operand rank {a.ndim} != {len(a_labels)} labels"
        )
    if b.ndim != len(b_labels):
        raise ValueError(
            f"contract {spec!r}: second operand rank {b.ndim} != {len(b_labels)} labels"
        )
    extents: dict[str, int] = {}
    for labels, arr, side in ((a_labels, a, "first"), (b_labels, b, "second")):
        for lab, ext in zip(labels, arr.shape):
            if lab in extents and extents[lab] != ext:
                raise ValueError(
                    f"contract {spec!r}: axis {lab!r} has extent {ext} on the "
                    f"{side} operand but {extents[lab]} elsewhere"
                )
            extents[lab] = ext
    return np.einsum(spec, a, b).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# normalization and activations


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    if axis >= x.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax: non-finite input")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(np.float32, copy=False)


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}"
        )
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    out = (x - mean) / np.sqrt(var + np.float32(eps)) * gamma + beta
    return out.astype(np.float32, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form: neither exp argument is ever positive, so no overflow
    x = np.asarray(x, dtype=np.float32)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
    x = x.astype(np.float32, copy=False)
    inner = SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(np.float32, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0).astype(np.float32, copy=False)


_POINTWISE = {"sigmoid": sigmoid, "gelu": gelu, "relu": relu}


def pointwise(name: str, x: np.ndarray) -> np.ndarray:
    try:
        fn = _POINTWISE[name]
    except KeyError:
        raise ValueError(f"pointwise: unknown activation {name!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# convolutions


def conv2d_1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Pointwise convolution. x: (C_in,H,W); w: (C_out,C_in); b: (C_out,) or None."""
    c_in = x.shape[0]
    if w.ndim != 2 or w.shape[1] != c_in:
        raise ValueError(f"conv2d_1x1: weight shape {w.shape} incompatible with C_in={c_in}")
    out = np.einsum("oc,chw->ohw", w, x)
    if b is not None:
        out = out + b[:, None, None]
    return out.astype(np.float32, copy=False)


def conv2d_3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """3x3 correlation, zero padding 1, stride 1. w: (C_out,C_in,3,3)."""
    c_in, h, wd = x.shape
    if w.ndim != 4 or w.shape[1] != c_in or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d_3x3: weight shape {w.shape} incompatible with C_in={c_in}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], h, wd), dtype=np.float32)
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,chw->ohw", w[:, :, dy, dx], xp[:, dy : dy + h, dx : dx + wd])
    if b is not None:
        out = out + b[:, None, None]
    return out.astype(np.float32, copy=False)


def depthwise_conv2d_3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 correlation, zero padding 1. w: (C,3,3)."""
    c, h, wd = x.shape
    if w.shape != (c, 3, 3):
        raise ValueError(f"depthwise_conv2d_3x3: weight shape {w.shape}, need ({c},3,3)")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += w[:, dy, dx][:, None, None] * xp[:, dy : dy + h, dx : dx + wd]
    return out.astype(np.float32, copy=False)


def conv2d_depthwise_separable(
    x: np.ndarray, w_depth: np.ndarray, w_point: np.ndarray, b: np.ndarray | None = None
) -> np.ndarray:
    """Per-channel 3x3 correlation followed by a pointwise 1x1 mix."""
    return conv2d_1x1(depthwise_conv2d_3x3(x, w_depth), w_point, b)


def conv2d(x: np.ndarray, weights, mode: str) -> np.ndarray:
    """Mode-dispatched 2-D convolution.

    weights is (w, b) for pointwise_1x1 / k3_pad1 and (w_depth, w_point, b)
    for depthwise_separable; any bias may be None.
    """
    if mode == "pointwise_1x1":
        w, b = weights
        return conv2d_1x1(x, w, b)
    if mode == "k3_pad1":
        w, b = weights
        return conv2d_3x3(x, w, b)
    if mode == "depthwise_separable":
        w_depth, w_point, b = weights
        return conv2d_depthwise_separable(x, w_depth, w_point, b)
    raise ValueError(f"conv2d: unknown mode {mode!r}")


def depthwise_conv1d(signals: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Row-wise 1-D correlation: row n of signals with kernel row n, zero padded.

    signals: (N, D); kernels: (N, m) with m odd; output (N, D).
    """
    n, d = signals.shape
    if kernels.ndim != 2 or kernels.shape[0] != n:
        raise ValueError(
            f"depthwise_conv1d: kernels shape {kernels.shape} incompatible with N={n}"
        )
    m = kernels.shape[1]
    if m % 2 == 0:
        raise ValueError(f"depthwise_conv1d: kernel length must be odd, got {m}")
    pad = (m - 1) // 2
    sp = np.pad(signals, ((0, 0), (pad, pad)))
    out = np.zeros_like(signals)
    for t in range(m):
        out += kernels[:, t : t + 1] * sp[:, t : t + d]
    return out.astype(np.float32, copy=False)


def transposed_conv2d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 2
) -> np.ndarray:
    """Exact 2x upsampling transposed convolution: 2x2 kernel, stride 2, no overlap.

    x: (C_in,H,W); w: (C_in,C_out,2,2); output (C_out,2H,2W).
    """
    if stride != 2:
        raise ValueError(f"transposed_conv2d: only stride 2 supported, got {stride}")
    c_in, h, wd = x.shape
    if w.ndim != 4 or w.shape[0] != c_in or w.shape[2:] != (2, 2):
        raise ValueError(
            f"transposed_conv2d: weight shape {w.shape} incompatible with C_in={c_in}"
        )
    c_out = w.shape[1]
    # non-overlapping taps: out[o, 2i+dy, 2j+dx] = sum_c x[c,i,j] * w[c,o,dy,dx]
    scattered = np.einsum("chw,codq->ohdwq", x, w)
    out = scattered.reshape(c_out, 2 * h, 2 * wd)
    if b is not None:
        out = out + b[:, None, None]
    return np.ascontiguousarray(out.astype(np.float32, copy=False))


# ---------------------------------------------------------------------------
# resampling and reductions


def _bilinear_axis(n_in: int, factor: int):
    """Half-pixel source indices and weights for one axis."""
    dst = np.arange(n_in * factor, dtype=np.float64)
    src = (dst + 0.5) / factor - 0.5
    lo = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = np.clip(src - lo, 0.0, 1.0)
    return lo, hi, frac.astype(np.float32)


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Channel-wise bilinear 2^k upsampling with half-pixel centers. x: (C,H,W).

    Uses the lerp form a + (b-a)*t so constant maps stay exactly constant.
    """
    if factor not in (2, 4, 8):
        raise ValueError(f"bilinear_upsample: factor must be one of 2/4/8, got {factor}")
    _, h, w = x.shape
    ylo, yhi, fy = _bilinear_axis(h, factor)
    xlo, xhi, fx = _bilinear_axis(w, factor)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    ll = x[:, ylo, :][:, :, xlo]
    lh = x[:, ylo, :][:, :, xhi]
    hl = x[:, yhi, :][:, :, xlo]
    hh = x[:, yhi, :][:, :, xhi]
    top = ll + (lh - ll) * fx
    bot = hl + (hh - hl) * fx
    return (top + (bot - top) * fy).astype(np.float32, copy=False)


def reduce_max(x: np.ndarray, axis: int) -> np.ndarray:
    if axis >= x.ndim:
        raise ValueError(f"reduce_max: axis {axis} out of range for rank {x.ndim}")
    return np.max(x, axis=axis).astype(np.float32, copy=False)


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    norm = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    return (x / norm).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# linear algebra helpers used by the model modules


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Row-vector linear map: x @ w (+ b). w is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x @ w
    if b is not None:
        out = out + b
    return out.astype(np.float32, copy=False)


def multi_head_attention(
    q_in: np.ndarray,
    kv_in: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    heads: int,
) -> np.ndarray:
    """Standard multi-head attention over row sets (no masking, no biases).

    q_in: (Nq, D); kv_in: (Nk, D); all projections (D, D) with D divisible
    by `heads`; returns (Nq, D) before any residual.
    """
    d = q_in.shape[-1]
    if d % heads != 0:
        raise ValueError(f"multi_head_attention: width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = np.float32(1.0 / math.sqrt(dh))
    q = linear(q_in, wq)
    k = linear(kv_in, wk)
    v = linear(kv_in, wv)
    out = np.empty((q_in.shape[0], d), dtype=np.float32)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = (q[:, sl] @ k[:, sl].T) * scale
        attn = softmax(logits.astype(np.float32), axis=1)
        out[:, sl] = attn @ v[:, sl]
    return linear(out, wo)
