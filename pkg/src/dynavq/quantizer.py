"""Quantization of patch embeddings against the multi-subcodebook store.

Embeddings are split column-wise into one chunk per sub-codebook. Each
chunk row is scored by cosine similarity against all primitives of its
sub-codebook, a candidate pool of the top ``pool`` primitives is formed,
the top ``n`` of the pool are kept, and the output is their
softmax-weighted sum. ``n`` is 1 in warm-up/top-1 mode, a constant in
fixed mode, and allocator-driven in adaptive mode.

Selection is non-differentiable; gradients treat the chosen index sets as
constants and flow through the weights and the primitive values. The
straight-through helper bridges decoder gradients across the quantizer to
the encoder.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dynavq.codebook import Codebook
from dynavq.numerics import DEFAULT_NORM_EPS, Array, check_finite

#: Linear weight normalization falls back to uniform weights when the
#: selected similarities sum to (almost) zero.
LINEAR_DENOM_EPS = 1e-12


@dataclass(frozen=True)
class QuantizeMode:
    """How many primitives each patch receives.

    kind "top1": single nearest primitive everywhere (warm-up behaviour).
    kind "fixed": a constant ``amount`` primitives per patch.
    kind "adaptive": per-patch counts derived from the allocation ratios,
    capped at ``amount``.
    """

    kind: str
    amount: int = 1

    def __post_init__(self):
        if self.kind not in ("top1", "fixed", "adaptive"):
            raise ValueError(f"unknown quantize mode {self.kind!r}")
        if self.amount < 1:
            raise ValueError("mode amount must be at least 1")

    @classmethod
    def top1(cls) -> "QuantizeMode":
        return cls("top1", 1)

    @classmethod
    def fixed_top_n(cls, n: int) -> "QuantizeMode":
        return cls("fixed", n)

    @classmethod
    def adaptive(cls, cap: int) -> "QuantizeMode":
        return cls("adaptive", cap)


@dataclass
class AllocationMap:
    """Chosen primitives per patch: ratios, counts, indices and weights.

    ``indices``/``weights`` have shape (subcodebooks, patches, cap) in
    selection order (descending similarity), padded with -1 / 0.0 beyond
    each patch's count.
    """

    ratios: np.ndarray
    counts: np.ndarray
    cap: int
    indices: np.ndarray
    weights: np.ndarray

    @property
    def patches(self) -> int:
        return self.counts.shape[0]

    @property
    def subcodebooks(self) -> int:
        return self.indices.shape[0]

    def patch_selection(self, sub: int, patch: int) -> Tuple[np.ndarray, np.ndarray]:
        """Indices and weights actually used for one patch and sub-codebook."""
        n = int(self.counts[patch])
        return self.indices[sub, patch, :n], self.weights[sub, patch, :n]

    def to_csv(self, path) -> None:
        """Write one row per patch: index, ratio, count, then per
        sub-codebook a cell of space-separated ``index:weight`` pairs."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["patch_index", "ratio", "count"]
            header += [f"sub{j}" for j in range(self.subcodebooks)]
            writer.writerow(header)
            for i in range(self.patches):
                row = [str(i), repr(float(self.ratios[i])), str(int(self.counts[i]))]
                for j in range(self.subcodebooks):
                    idx, w = self.patch_selection(j, i)
                    row.append(" ".join(f"{int(a)}:{float(b)!r}" for a, b in zip(idx, w)))
                writer.writerow(row)


@dataclass
class ChunkCache:
    rows: np.ndarray
    sims: np.ndarray
    sel_mask: np.ndarray
    weights_dense: np.ndarray
    row_norms: np.ndarray
    code_norms: np.ndarray


@dataclass
class QuantizeOutput:
    """Quantized embeddings plus training bookkeeping."""

    quantized: np.ndarray
    alloc: AllocationMap
    commit_loss: float
    per_patch_error: np.ndarray
    usage_delta: np.ndarray
    cache: Optional[List[ChunkCache]] = field(default=None, repr=False)


def chunk_embeddings(embeddings: Array, subcodebooks: int) -> List[Array]:
    """Split (patches x dim) column-wise into equal-width chunks."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("embeddings must be 2-D")
    if z.shape[1] % subcodebooks != 0:
        raise ValueError(
            f"embedding dim {z.shape[1]} not divisible by {subcodebooks} sub-codebooks"
        )
    width = z.shape[1] // subcodebooks
    return [z[:, j * width:(j + 1) * width] for j in range(subcodebooks)]


def _quantize_rows(
    rows: Array,
    sub_cb: Array,
    counts: Array,
    pool: int,
    temperature: float,
    eps: float,
    weighting: str,
) -> Tuple[Array, Array, Array, ChunkCache]:
    """Vectorized selection and weighted sum for one sub-codebook.

    Returns (outputs, order, dense weights, cache). ``order`` sorts the
    primitives by descending similarity with ties broken by ascending
    index, so all selections are deterministic.
    """
    num_codes = sub_cb.shape[0]
    if not 1 <= pool <= num_codes:
        raise ValueError(f"pool must lie in [1, {num_codes}], got {pool}")
    if np.any(counts < 1) or np.any(counts > pool):
        raise ValueError("per-patch counts must lie in [1, pool]")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    dots = np.einsum("ld,vd->lv", rows, sub_cb, optimize=False)
    row_norms = np.maximum(
        np.sqrt(np.einsum("ld,ld->l", rows, rows, optimize=False)), eps
    )
    code_norms = np.maximum(
        np.sqrt(np.einsum("vd,vd->v", sub_cb, sub_cb, optimize=False)), eps
    )
    sims = dots / np.outer(row_norms, code_norms)

    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(
        ranks, order, np.broadcast_to(np.arange(num_codes), sims.shape), axis=1
    )
    # candidate pool = top `pool`; kept set = top counts[i] of the pool
    sel_mask = ranks < np.asarray(counts, dtype=np.int64)[:, None]

    if weighting == "softmax":
        scaled = sims / temperature
        masked = np.where(sel_mask, scaled, -np.inf)
        row_max = masked.max(axis=1, keepdims=True)
        expd = np.where(sel_mask, np.exp(masked - row_max), 0.0)
        weights = expd / expd.sum(axis=1, keepdims=True)
    elif weighting == "linear":
        picked = np.where(sel_mask, sims, 0.0)
        denom = picked.sum(axis=1, keepdims=True)
        uniform = sel_mask / np.maximum(sel_mask.sum(axis=1, keepdims=True), 1)
        safe = np.abs(denom) > LINEAR_DENOM_EPS
        weights = np.where(safe, picked / np.where(safe, denom, 1.0), uniform)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")

    out = np.einsum("lv,vd->ld", weights, sub_cb, optimize=False)
    cache = ChunkCache(
        rows=rows,
        sims=sims,
        sel_mask=sel_mask,
        weights_dense=weights,
        row_norms=row_norms,
        code_norms=code_norms,
    )
    return out, order, weights, cache


def quantize_chunk(
    chunk_row: Array,
    sub_cb: Array,
    n: int,
    pool: int,
    temperature: float = 1.0,
    eps: float = DEFAULT_NORM_EPS,
    weighting: str = "softmax",
) -> Tuple[Array, Array, Array]:
    """Quantize a single chunk row against one sub-codebook.

    Returns (output vector, selected indices by descending similarity,
    weights over the selection).
    """
    row = check_finite("chunk", chunk_row).reshape(1, -1)
    cb = np.asarray(sub_cb, dtype=np.float64)
    if cb.ndim != 2 or cb.shape[1] != row.shape[1]:
        raise ValueError("sub-codebook width must match the chunk")
    if not 1 <= n <= pool:
        raise ValueError(f"n must lie in [1, pool={pool}], got {n}")
    out, order, weights, _ = _quantize_rows(
        row, cb, np.array([n]), pool, temperature, eps, weighting
    )
    idx = order[0, :n]
    return out[0], idx, weights[0, idx]


def quantize(
    embeddings: Array,
    cb: Codebook,
    ratios: Optional[Array],
    mode: QuantizeMode,
    temperature: float = 1.0,
    beta: float = 0.25,
    pool: Optional[int] = None,
    eps: float = DEFAULT_NORM_EPS,
    weighting: str = "softmax",
) -> QuantizeOutput:
    """Quantize a full embedding matrix.

    Per-patch counts are 1 (top1 mode), ``mode.amount`` (fixed mode), or
    derived from ``ratios`` (adaptive mode, capped at ``mode.amount``).
    Selected primitives' usage counters on ``cb`` are incremented.
    """
    from dynavq.allocator import count_from_ratio

    z = check_finite("embeddings", embeddings)
    if z.ndim != 2 or z.shape[1] != cb.embed_dim:
        raise ValueError(
            f"embeddings must be (patches, {cb.embed_dim}), got {z.shape}"
        )
    num_codes = cb.primitives_per_sub
    patches = z.shape[0]

    if mode.kind == "top1":
        counts = np.ones(patches, dtype=np.int64)
        cap = 1
        eff_pool = 1
    elif mode.kind == "fixed":
        if mode.amount > num_codes:
            raise ValueError(
                f"fixed count {mode.amount} exceeds sub-codebook size {num_codes}"
            )
        counts = np.full(patches, mode.amount, dtype=np.int64)
        cap = mode.amount
        eff_pool = mode.amount
    else:
        if mode.amount > num_codes:
            raise ValueError(
                f"adaptive cap {mode.amount} exceeds sub-codebook size {num_codes}"
            )
        if ratios is None:
            raise ValueError("adaptive mode requires allocation ratios")
        r = np.asarray(ratios, dtype=np.float64)
        if r.shape != (patches,):
            raise ValueError("ratio vector length must match the patch count")
        counts = count_from_ratio(r, mode.amount)
        cap = mode.amount
        eff_pool = mode.amount if pool is None else pool
        if not cap <= eff_pool <= num_codes:
            raise ValueError(
                f"pool must lie in [{cap}, {num_codes}], got {eff_pool}"
            )

    chunks = chunk_embeddings(z, cb.subcodebooks)
    quantized = np.empty_like(z)
    indices = np.full((cb.subcodebooks, patches, cap), -1, dtype=np.int64)
    sel_weights = np.zeros((cb.subcodebooks, patches, cap))
    usage_delta = np.zeros((cb.subcodebooks, num_codes), dtype=np.int64)
    caches: List[ChunkCache] = []
    width = cb.primitive_dim
    col_index = np.arange(cap)[None, :]
    for j in range(cb.subcodebooks):
        out, order, weights, cache = _quantize_rows(
            chunks[j], cb.entries[j], counts, eff_pool, temperature, eps, weighting
        )
        quantized[:, j * width:(j + 1) * width] = out
        head = order[:, :cap]
        keep = col_index < counts[:, None]
        indices[j] = np.where(keep, head, -1)
        sel_weights[j] = np.where(keep, np.take_along_axis(weights, head, axis=1), 0.0)
        selected_ids = np.nonzero(cache.sel_mask)[1]
        usage_delta[j] = np.bincount(selected_ids, minlength=num_codes)
        caches.append(cache)
    cb.usage_counts += usage_delta.astype(np.uint64)

    if ratios is not None:
        stored_ratios = np.asarray(ratios, dtype=np.float64).copy()
    else:
        # effective ratio realized by the forced counts
        stored_ratios = counts / float(cap)
    alloc = AllocationMap(
        ratios=stored_ratios,
        counts=counts,
        cap=cap,
        indices=indices,
        weights=sel_weights,
    )
    per_patch_error = ((quantized - z) ** 2).sum(axis=1)
    commit, _, _ = commitment_loss(z, quantized, beta)
    return QuantizeOutput(
        quantized=quantized,
        alloc=alloc,
        commit_loss=commit,
        per_patch_error=per_patch_error,
        usage_delta=usage_delta,
        cache=caches,
    )


def quantize_backward(
    grad_quantized: Array,
    caches: Sequence[ChunkCache],
    cb: Codebook,
    temperature: float = 1.0,
    eps: float = DEFAULT_NORM_EPS,
) -> Tuple[Array, Array]:
    """Exact gradients through the weighted sum, selection held fixed.

    Given dL/d(quantized), returns (dL/d entries, dL/d embeddings) flowing
    through both the primitive values and the softmax weights (whose
    similarities depend on the inputs and the primitives).
    """
    g = np.asarray(grad_quantized, dtype=np.float64)
    width = cb.primitive_dim
    d_entries = np.zeros_like(cb.entries)
    d_input = np.zeros((g.shape[0], cb.embed_dim))
    for j, cache in enumerate(caches):
        gj = g[:, j * width:(j + 1) * width]
        w = cache.weights_dense
        sims = cache.sims
        rows = cache.rows
        sub_cb = cb.entries[j]
        # direct path through the primitive values
        d_entries[j] += np.einsum("lv,ld->vd", w, gj, optimize=False)
        # path through the weights
        d_w = np.einsum("ld,vd->lv", gj, sub_cb, optimize=False)
        d_w = np.where(cache.sel_mask, d_w, 0.0)
        row_dot = (w * d_w).sum(axis=1, keepdims=True)
        d_sims = w * (d_w - row_dot) / temperature
        # cosine backward: sims = <z, c> / (|z| |c|) with clamped norms
        nz = cache.row_norms
        nc = cache.code_norms
        scale = d_sims / np.outer(nz, nc)
        d_input[:, j * width:(j + 1) * width] += np.einsum(
            "lv,vd->ld", scale, sub_cb, optimize=False
        )
        d_entries[j] += np.einsum("lv,ld->vd", scale, rows, optimize=False)
        row_unclamped = (
            np.sqrt(np.einsum("ld,ld->l", rows, rows, optimize=False)) > eps
        )
        col_unclamped = (
            np.sqrt(np.einsum("vd,vd->v", sub_cb, sub_cb, optimize=False)) > eps
        )
        row_corr = (d_sims * sims).sum(axis=1) * row_unclamped
        col_corr = (d_sims * sims).sum(axis=0) * col_unclamped
        d_input[:, j * width:(j + 1) * width] -= (
            row_corr / (nz * nz)
        )[:, None] * rows
        d_entries[j] -= (col_corr / (nc * nc))[:, None] * sub_cb
    return d_entries, d_input


def commitment_loss(
    embeddings: Array, quantized: Array, beta: float
) -> Tuple[float, Array, Array]:
    """VQ commitment objective with stop-gradient semantics.

    Value is ``beta * mean_i |z_i - sg(q_i)|^2 + mean_i |sg(z_i) - q_i|^2``
    (mean over patches of per-patch squared L2 norms). Returns the value
    plus the encoder-side gradient (w.r.t. the embeddings, from the first
    term) and the codebook-side gradient (w.r.t. the quantized output,
    from the second term). Decoder gradients are bridged to the encoder
    separately via straight_through.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    q = np.asarray(quantized, dtype=np.float64)
    if z.shape != q.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {q.shape}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    patches = z.shape[0]
    mean_err = float(np.mean(((z - q) ** 2).sum(axis=1)))
    value = beta * mean_err + mean_err
    d_embeddings = 2.0 * beta * (z - q) / patches
    d_quantized = 2.0 * (q - z) / patches
    return value, d_embeddings, d_quantized


def straight_through(decoder_grad: Array) -> Array:
    """Copy decoder-side gradients across the quantizer unchanged."""
    return np.asarray(decoder_grad, dtype=np.float64)
