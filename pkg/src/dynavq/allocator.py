"""Per-patch allocation ratios and their training target.

A two-layer 1D convolutional network (conv -> ReLU -> conv -> sigmoid)
runs along the patch sequence and emits one ratio per patch. The ratio is
mapped to a primitive count, and the network is supervised by the
min-max-normalized per-patch quantization error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from dynavq.numerics import Array, check_finite

#: Sigmoid outputs are clipped to this open interval so ratios never hit
#: 0 or 1 exactly even when the logits saturate in float64.
RATIO_CLIP = 1e-12


@dataclass
class AllocatorParams:
    """Weights of the allocator network.

    conv1_w: (hidden, in_channels, k1) kernel over the patch axis.
    conv2_w: (1, hidden, k2) kernel producing the ratio logit.
    Kernel widths must be odd (same-length zero padding).
    """

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray

    def __post_init__(self):
        if self.conv1_w.ndim != 3 or self.conv2_w.ndim != 3:
            raise ValueError("conv kernels must be 3-D (out, in, width)")
        if self.conv1_w.shape[2] % 2 == 0 or self.conv2_w.shape[2] % 2 == 0:
            raise ValueError("kernel widths must be odd")
        if self.conv2_w.shape[0] != 1:
            raise ValueError("second conv must emit a single channel")
        if self.conv2_w.shape[1] != self.conv1_w.shape[0]:
            raise ValueError("conv2 input channels must match conv1 output channels")
        for arr in (self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b):
            if not np.all(np.isfinite(arr)):
                raise ValueError("allocator parameters must be finite")

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def hidden(self) -> int:
        return self.conv1_w.shape[0]

    def copy(self) -> "AllocatorParams":
        return AllocatorParams(
            self.conv1_w.copy(), self.conv1_b.copy(),
            self.conv2_w.copy(), self.conv2_b.copy(),
        )


@dataclass
class AllocatorGrads:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray


def init_allocator(
    embed_dim: int,
    seed: int,
    hidden: int | None = None,
    kernel1: int = 3,
    kernel2: int = 3,
) -> AllocatorParams:
    """Allocator with uniform(+-1/sqrt(fan_in)) weights; hidden defaults to embed_dim/2."""
    if hidden is None:
        hidden = max(1, embed_dim // 2)
    rng = np.random.default_rng(seed)
    bound1 = 1.0 / np.sqrt(embed_dim * kernel1)
    bound2 = 1.0 / np.sqrt(hidden * kernel2)
    return AllocatorParams(
        conv1_w=rng.uniform(-bound1, bound1, size=(hidden, embed_dim, kernel1)),
        conv1_b=np.zeros(hidden),
        conv2_w=rng.uniform(-bound2, bound2, size=(1, hidden, kernel2)),
        conv2_b=np.zeros(1),
    )


def _conv1d_same(x: Array, w: Array, b: Array) -> Tuple[Array, Array]:
    """Same-length 1-D convolution along the last axis.

    x: (in_channels, length); w: (out, in, width) with odd width.
    Returns (output (out, length), zero-padded input used, kept for backward).
    """
    width = w.shape[2]
    radius = width // 2
    length = x.shape[1]
    xpad = np.pad(x, ((0, 0), (radius, radius)))
    out = np.tile(b[:, None], (1, length))
    for u in range(width):
        out += w[:, :, u] @ xpad[:, u:u + length]
    return out, xpad


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AllocatorCache:
    """Activations stashed by allocator_forward for the backward pass."""

    xpad: np.ndarray
    pre_relu: np.ndarray
    hidden_pad: np.ndarray
    ratios: np.ndarray


def allocator_forward(
    embeddings: Array, params: AllocatorParams
) -> Tuple[Array, AllocatorCache]:
    """Map patch embeddings (length x dim) to per-patch ratios in (0, 1)."""
    z = check_finite("embeddings", embeddings)
    if z.ndim != 2 or z.shape[1] != params.in_channels:
        raise ValueError(
            f"embeddings must be (patches, {params.in_channels}), got {z.shape}"
        )
    x = z.T
    pre_relu, xpad = _conv1d_same(x, params.conv1_w, params.conv1_b)
    hidden = np.maximum(pre_relu, 0.0)
    radius2 = params.conv2_w.shape[2] // 2
    hidden_pad = np.pad(hidden, ((0, 0), (radius2, radius2)))
    length = x.shape[1]
    logits = np.tile(params.conv2_b[:, None], (1, length))
    for u in range(params.conv2_w.shape[2]):
        logits += params.conv2_w[:, :, u] @ hidden_pad[:, u:u + length]
    ratios = np.clip(_sigmoid(logits[0]), RATIO_CLIP, 1.0 - RATIO_CLIP)
    return ratios, AllocatorCache(xpad, pre_relu, hidden_pad, ratios)


def allocator_backward(
    grad_ratios: Array, cache: AllocatorCache, params: AllocatorParams
) -> Tuple[AllocatorGrads, Array]:
    """Backprop through sigmoid -> conv2 -> ReLU -> conv1.

    Returns gradients for the parameters and for the input embeddings.
    """
    r = cache.ratios
    length = r.shape[0]
    ds = (np.asarray(grad_ratios, dtype=np.float64) * r * (1.0 - r))[None, :]

    k2 = params.conv2_w.shape[2]
    radius2 = k2 // 2
    d_w2 = np.zeros_like(params.conv2_w)
    d_hidden_pad = np.zeros_like(cache.hidden_pad)
    for u in range(k2):
        d_w2[:, :, u] = ds @ cache.hidden_pad[:, u:u + length].T
        d_hidden_pad[:, u:u + length] += params.conv2_w[:, :, u].T @ ds
    d_b2 = ds.sum(axis=1)
    d_hidden = d_hidden_pad[:, radius2:radius2 + length]
    d_pre = d_hidden * (cache.pre_relu > 0)

    k1 = params.conv1_w.shape[2]
    radius1 = k1 // 2
    d_w1 = np.zeros_like(params.conv1_w)
    d_xpad = np.zeros_like(cache.xpad)
    for u in range(k1):
        d_w1[:, :, u] = d_pre @ cache.xpad[:, u:u + length].T
        d_xpad[:, u:u + length] += params.conv1_w[:, :, u].T @ d_pre
    d_b1 = d_pre.sum(axis=1)
    d_input = d_xpad[:, radius1:radius1 + length].T
    return AllocatorGrads(d_w1, d_b1, d_w2, d_b2), d_input


def count_from_ratio(ratios: Array, cap: int) -> Array:
    """Map ratios to primitive counts: clamp(round(r * cap), 1, cap).

    Rounding is half-up, so every patch gets at least one primitive and at
    most ``cap``.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    r = np.asarray(ratios, dtype=np.float64)
    counts = np.floor(r * cap + 0.5)
    return np.clip(counts, 1, cap).astype(np.int64)


def ratio_target(
    embeddings: Array, quantized: Array, primitives_per_sub: int
) -> Array:
    """Per-patch supervision targets from quantization error.

    Squared L2 errors per patch are min-max mapped onto
    [1/primitives_per_sub, 1]. A degenerate batch (all errors equal) maps
    everything to the lower bound. The output is a constant teaching
    signal: no gradient flows through it.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    q = np.asarray(quantized, dtype=np.float64)
    if z.shape != q.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {q.shape}")
    if primitives_per_sub < 1:
        raise ValueError("primitives_per_sub must be at least 1")
    errors = ((q - z) ** 2).sum(axis=1)
    lo = 1.0 / primitives_per_sub
    e_min = errors.min()
    e_max = errors.max()
    if e_max == e_min:
        return np.full(errors.shape, lo)
    scaled = (errors - e_min) / (e_max - e_min)
    return np.clip(lo + scaled * (1.0 - lo), lo, 1.0)


def dpa_loss(ratios: Array, targets: Array) -> Tuple[float, Array]:
    """Mean squared error between ratios and targets, plus d/d ratios."""
    r = np.asarray(ratios, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if r.shape != t.shape or r.ndim != 1:
        raise ValueError(f"length mismatch: {r.shape} vs {t.shape}")
    diff = r - t
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / r.shape[0]
    return loss, grad
