"""Scratch calibration for acceptance-test configs (not part of the package)."""
import sys
import time

import numpy as np

from dynavq.checkpoint import load_checkpoint
from dynavq.metrics import (
    centroid_similarity_matrix,
    complexity_correlation,
    evaluate_reconstruction,
)
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, run_training


def base_config(tmp, seed, tag, **overrides):
    cfg = dict(
        total_steps=1000,
        warmup_fraction=0.25,
        batch_size=8,
        learning_rate=1e-3,
        subcodebooks=4,
        primitives_per_sub=64,
        primitive_dim=4,
        top_k=16,
        pool=16,
        image_size=32,
        patch_size=4,
        hidden_dim=32,
        n_images=64,
        seed=seed,
        metrics_path=f"{tmp}/{tag}_metrics.csv",
        checkpoint_path=f"{tmp}/{tag}.ckpt",
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


def timing(tmp):
    t0 = time.time()
    cfg = base_config(tmp, 0, "timing", total_steps=200)
    run_training(cfg)
    dt = time.time() - t0
    print(f"200 steps took {dt:.1f}s -> {dt/200*1000:.1f} ms/step")


def warmup_trend(tmp):
    cfg = base_config(tmp, 0, "warm", total_steps=400, warmup_fraction=0.25)
    t0 = time.time()
    _, metrics = run_training(cfg)
    lines = metrics.read_text().splitlines()[1:]
    rows = [line.split(",") for line in lines]
    mean_counts = [float(r[6]) for r in rows]
    print(f"warmup run: {time.time()-t0:.1f}s")
    print("  steps 0-99 mean_count set:", sorted(set(mean_counts[:100])))
    print("  step 100 (boundary) mean_count:", mean_counts[100])
    print("  steps 100-110:", [f"{c:.2f}" for c in mean_counts[100:110]])


def diversity(tmp, steps, lr=1e-3):
    print(f"--- diversity margin, steps={steps}, lr={lr}")
    for seed in range(3):
        vals = {}
        for lam in (0.0, 0.25):
            tag = f"div_{seed}_{lam}"
            cfg = base_config(tmp, seed, tag, total_steps=steps,
                              learning_rate=lr, lambda_dqp=lam)
            ckpt, _ = run_training(cfg)
            model = load_checkpoint(ckpt).model
            sims = centroid_similarity_matrix(model.codebook)
            off = sims[~np.eye(sims.shape[0], dtype=bool)]
            _, val = build_datasets(cfg)
            stats = evaluate_reconstruction(model, val, QuantizeMode.adaptive(cfg.top_k))
            vals[lam] = (float(np.mean(np.abs(off))), stats.mean_mse)
        abs0, mse0 = vals[0.0]
        abs1, mse1 = vals[0.25]
        margin = abs0 - abs1
        mse_ratio = mse1 / mse0
        ok = margin >= 0.05 and mse_ratio <= 1.10
        print(f"  seed {seed}: |cos| {abs0:.3f} -> {abs1:.3f} margin {margin:+.3f}  "
              f"mse {mse0:.5f} -> {mse1:.5f} ratio {mse_ratio:.3f}  {'OK' if ok else 'FAIL'}")


def topk_and_spearman(tmp, steps, lr=1e-3):
    print(f"--- topk/adaptive trend, steps={steps}, lr={lr}")
    for seed in range(3):
        results = {}
        for tag, mode_name, overrides in (
            ("top1", "top1", dict(quantize_mode="top1")),
            ("fixed10", "fixed", dict(quantize_mode="fixed", fixed_n=10)),
            ("adaptive", "adaptive", dict(quantize_mode="adaptive")),
        ):
            cfg = base_config(tmp, seed, f"t_{seed}_{tag}", total_steps=steps,
                              learning_rate=lr, **overrides)
            ckpt, _ = run_training(cfg)
            model = load_checkpoint(ckpt).model
            _, val = build_datasets(cfg)
            if mode_name == "top1":
                mode = QuantizeMode.top1()
            elif mode_name == "fixed":
                mode = QuantizeMode.fixed_top_n(10)
            else:
                mode = QuantizeMode.adaptive(cfg.top_k)
            stats = evaluate_reconstruction(model, val, mode)
            rho = None
            if mode_name == "adaptive":
                rho = complexity_correlation(stats.counts, stats.labels)
            results[tag] = (stats.mean_mse, stats.mean_count, rho)
        m1, c1, _ = results["top1"]
        m10, c10, _ = results["fixed10"]
        ma, ca, rho = results["adaptive"]
        ok4 = m10 < m1 and ma <= m1 and ca < 10
        ok5 = rho >= 0.5
        print(f"  seed {seed}: top1 mse {m1:.5f} | fixed10 {m10:.5f} | "
              f"adaptive {ma:.5f} count {ca:.2f} rho {rho:.3f} "
              f"{'OK4' if ok4 else 'FAIL4'} {'OK5' if ok5 else 'FAIL5'}")


if __name__ == "__main__":
    import tempfile

    tmp = tempfile.mkdtemp()
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    if which in ("all", "timing"):
        timing(tmp)
    if which in ("all", "warm"):
        warmup_trend(tmp)
    if which in ("all", "div"):
        steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1000
        diversity(tmp, steps)
    if which in ("all", "topk"):
        steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1000
        topk_and_spearman(tmp, steps)
