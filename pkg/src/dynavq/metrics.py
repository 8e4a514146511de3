"""Reconstruction quality, codebook health and allocation diagnostics.

PSNR and a windowed SSIM for image quality, usage perplexity for codebook
health, rate-distortion sweeps over forced primitive counts, allocation
heatmaps, Spearman correlation between allocation and ground-truth patch
complexity, and the centroid similarity matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from dynavq.autoencoder import reconstruction_loss
from dynavq.codebook import Codebook, centroids
from dynavq.dataio import Dataset, save_raster
from dynavq.numerics import Array, cosine_similarity_matrix
from dynavq.pipeline import Model, forward_image
from dynavq.quantizer import AllocationMap, QuantizeMode

#: PSNR reported for a zero-MSE pair; keeps CSV outputs free of infinities.
PSNR_CAP_DB = 99.0


def psnr(a: Array, b: Array, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give the cap."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(max_val * max_val / mse))


def ssim(
    a: Array,
    b: Array,
    window: int = 8,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over non-overlapping windows.

    Uses the standard luminance/contrast/structure product per window with
    population statistics and dynamic range 1. Ragged edge pixels beyond
    the last full window are ignored.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 2 or x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window}")
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    rows = x.shape[0] // window
    cols = x.shape[1] // window
    values = []
    for wy in range(rows):
        for wx in range(cols):
            wa = x[wy * window:(wy + 1) * window, wx * window:(wx + 1) * window]
            wb = y[wy * window:(wy + 1) * window, wx * window:(wx + 1) * window]
            mu_a = wa.mean()
            mu_b = wb.mean()
            var_a = ((wa - mu_a) ** 2).mean()
            var_b = ((wb - mu_b) ** 2).mean()
            cov = ((wa - mu_a) * (wb - mu_b)).mean()
            num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
            den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
            values.append(num / den)
    return float(np.mean(values))


def codebook_perplexity(usage_counts: Array) -> Union[float, np.ndarray]:
    """exp(entropy) of the normalized usage distribution.

    1-D input returns a float; an (subs, prims) matrix returns one value
    per sub-codebook. Uniform usage over n codes gives n; a single live
    code gives 1.
    """
    counts = np.asarray(usage_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("usage counts must be non-negative")
    single = counts.ndim == 1
    mat = counts.reshape(1, -1) if single else counts
    totals = mat.sum(axis=1)
    if np.any(totals == 0):
        raise ValueError("usage counts must not be all zero")
    probs = mat / totals[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(probs > 0, np.log(probs), 0.0)
    entropy = -(probs * logs).sum(axis=1)
    out = np.exp(entropy)
    return float(out[0]) if single else out


def allocation_heatmap(
    alloc: AllocationMap, rows: int, cols: int, path=None
) -> np.ndarray:
    """Per-patch allocation counts as a (rows, cols) grid.

    When ``path`` is given the grid is also exported as a PGM with counts
    [1, cap] scaled linearly onto pixel levels [0, 255].
    """
    if rows * cols != alloc.patches:
        raise ValueError(
            f"grid {rows}x{cols} does not match {alloc.patches} patches"
        )
    grid = alloc.counts.reshape(rows, cols)
    if path is not None:
        if alloc.cap > 1:
            scaled = (grid - 1) / (alloc.cap - 1)
        else:
            scaled = np.zeros_like(grid, dtype=np.float64)
        save_raster(scaled, path)
    return grid


def _average_ranks(values: Array) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.shape[0])
    i = 0
    while i < v.shape[0]:
        j = i
        while j < v.shape[0] and v[order[j]] == v[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def spearman(a: Array, b: Array) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D vectors of equal length")
    if x.shape[0] < 3:
        raise ValueError("need at least 3 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("correlation undefined for constant inputs")
    ra = _average_ranks(x)
    rb = _average_ranks(y)
    da = ra - ra.mean()
    db = rb - rb.mean()
    return float((da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum()))


def complexity_correlation(counts: Array, labels: Array) -> float:
    """Spearman correlation between allocation counts and patch labels."""
    return spearman(counts, labels)


def centroid_similarity_matrix(cb: Codebook, path=None) -> np.ndarray:
    """Pairwise cosine similarities between sub-codebook centroids.

    The diagonal is pinned to exactly 1 (cosine of a vector with itself).
    Optionally exported as CSV.
    """
    cents = centroids(cb)
    sims = cosine_similarity_matrix(cents, cents)
    np.fill_diagonal(sims, 1.0)
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in sims:
                writer.writerow([repr(float(v)) for v in row])
    return sims


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalStats:
    """Aggregate reconstruction statistics over a dataset."""

    mean_mse: float
    mean_psnr: float
    mean_ssim: float
    mean_count: float
    perplexity: np.ndarray
    counts: np.ndarray
    labels: np.ndarray


@dataclass
class RDPoint:
    """One operating point of the rate-distortion sweep."""

    forced_n: Union[int, str]
    mean_mse: float
    mean_count: float


def evaluate_reconstruction(
    model: Model, dataset: Dataset, mode: Optional[QuantizeMode] = None
) -> EvalStats:
    """Evaluate pixel reconstruction of a dataset under one quantize mode.

    MSE is measured pre-clamp (training semantics); PSNR/SSIM are measured
    on outputs clamped to [0, 1] (export semantics). The model's stored
    usage counters are left untouched.
    """
    if len(dataset.items) == 0:
        raise ValueError("dataset is empty")
    work = model.copy()
    if mode is None:
        mode = work.adaptive_mode()
    mses: List[float] = []
    psnrs: List[float] = []
    ssims: List[float] = []
    all_counts: List[np.ndarray] = []
    all_labels: List[np.ndarray] = []
    usage = np.zeros_like(work.codebook.usage_counts, dtype=np.float64)
    for item in dataset.items:
        h, w = item.image.shape
        result = forward_image(work, item.image, mode)
        recon = result.recon_image(h, w, work.patch_size)
        mses.append(reconstruction_loss(item.image, recon)[0])
        clamped = np.clip(recon, 0.0, 1.0)
        psnrs.append(psnr(item.image, clamped))
        ssims.append(ssim(item.image, clamped))
        all_counts.append(result.quant.alloc.counts)
        all_labels.append(item.patch_labels.reshape(-1))
        usage += result.quant.usage_delta
    counts = np.concatenate(all_counts)
    labels = np.concatenate(all_labels)
    return EvalStats(
        mean_mse=float(np.mean(mses)),
        mean_psnr=float(np.mean(psnrs)),
        mean_ssim=float(np.mean(ssims)),
        mean_count=float(np.mean(counts)),
        perplexity=np.asarray(codebook_perplexity(usage)),
        counts=counts,
        labels=labels,
    )


def rate_distortion(
    model: Union[Model, str, Path], dataset: Dataset, forced_ns: Sequence[int]
) -> List[RDPoint]:
    """Sweep forced primitive counts plus the adaptive allocator.

    ``model`` may be a Model or a checkpoint path. Returns one point per
    forced n (quantizer in fixed mode) followed by one "adaptive" point.
    """
    if not isinstance(model, Model):
        from dynavq.checkpoint import load_checkpoint

        model = load_checkpoint(model).model
    prims = model.codebook.primitives_per_sub
    points: List[RDPoint] = []
    for n in forced_ns:
        if not 1 <= n <= prims:
            raise ValueError(f"forced n must lie in [1, {prims}], got {n}")
        stats = evaluate_reconstruction(model, dataset, QuantizeMode.fixed_top_n(n))
        points.append(RDPoint(forced_n=int(n), mean_mse=stats.mean_mse,
                              mean_count=stats.mean_count))
    stats = evaluate_reconstruction(model, dataset, model.adaptive_mode())
    points.append(RDPoint(forced_n="adaptive", mean_mse=stats.mean_mse,
                          mean_count=stats.mean_count))
    return points


def write_eval_report(path, rows: Sequence[dict]) -> None:
    """CSV report: setting, mean_mse, psnr, ssim, mean_count, perplexities."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["setting", "mean_mse", "psnr", "ssim", "mean_count",
             "perplexity_per_subcodebook"]
        )
        for row in rows:
            writer.writerow([
                row["setting"],
                repr(float(row["mean_mse"])),
                repr(float(row["psnr"])),
                repr(float(row["ssim"])),
                repr(float(row["mean_count"])),
                ";".join(repr(float(p)) for p in np.atleast_1d(row["perplexity"])),
            ])
