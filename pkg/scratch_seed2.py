"""Probe rho and mode orderings with n_images=128."""
import tempfile

import numpy as np

from dynavq.checkpoint import load_checkpoint
from dynavq.metrics import evaluate_reconstruction, spearman
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, run_training


def run_mode(tmp, seed, tag, steps, n_images, overrides):
    cfg = TrainConfig(
        total_steps=steps, warmup_fraction=0.25, batch_size=8, learning_rate=1e-3,
        subcodebooks=4, primitives_per_sub=64, primitive_dim=4,
        top_k=16, pool=16, temperature=0.01, image_size=32, patch_size=4,
        hidden_dim=32, n_images=n_images, seed=seed,
        metrics_path=f"{tmp}/{tag}_m.csv", checkpoint_path=f"{tmp}/{tag}.ckpt",
        **overrides,
    )
    ckpt, _ = run_training(cfg)
    return cfg, load_checkpoint(ckpt).model


if __name__ == "__main__":
    import sys

    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2500
    n_images = int(sys.argv[2]) if len(sys.argv) > 2 else 128
    tmp = tempfile.mkdtemp()
    for seed in (0, 1, 2):
        out = {}
        for tag, overrides, mode in (
            ("top1", dict(quantize_mode="top1"), QuantizeMode.top1()),
            ("fixed10", dict(quantize_mode="fixed", fixed_n=10),
             QuantizeMode.fixed_top_n(10)),
            ("adaptive", dict(quantize_mode="adaptive"), None),
        ):
            cfg, model = run_mode(tmp, seed, f"{seed}_{tag}", steps, n_images, overrides)
            _, val = build_datasets(cfg)
            stats = evaluate_reconstruction(
                model, val, mode if mode else model.adaptive_mode())
            rho = None
            if tag == "adaptive":
                rho = spearman(stats.counts.astype(float), stats.labels)
            out[tag] = (stats.mean_mse, stats.mean_count, rho)
        m1 = out["top1"][0]
        m10 = out["fixed10"][0]
        ma, ca, rho = out["adaptive"]
        ok4 = m10 < m1 and ma <= m1 and ca < 10
        ok5 = rho >= 0.5
        print(f"steps={steps} n={n_images} seed {seed}: top1={m1:.5f} "
              f"fixed10={m10:.5f} adaptive={ma:.5f} cnt={ca:.2f} rho={rho:.3f} "
              f"{'OK4' if ok4 else 'FAIL4'} {'OK5' if ok5 else 'FAIL5'}", flush=True)
