"""Full criterion-shaped rehearsal at the candidate acceptance config."""
import sys
import tempfile
import time

import numpy as np

from dynavq.checkpoint import load_checkpoint
from dynavq.metrics import (
    centroid_similarity_matrix,
    evaluate_reconstruction,
    spearman,
)
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, run_training


def make_config(tmp, tag, seed, **overrides):
    base = dict(
        total_steps=1500,
        warmup_fraction=0.25,
        batch_size=8,
        learning_rate=1e-3,
        subcodebooks=4,
        primitives_per_sub=64,
        primitive_dim=4,
        top_k=16,
        pool=16,
        temperature=0.01,
        image_size=32,
        patch_size=4,
        hidden_dim=32,
        n_images=64,
        seed=seed,
        metrics_path=f"{tmp}/{tag}_metrics.csv",
        checkpoint_path=f"{tmp}/{tag}.ckpt",
    )
    base.update(overrides)
    return TrainConfig(**base)


def criterion4(tmp):
    print("--- criterion 4/5 rehearsal (separate models per mode)")
    t0 = time.time()
    for seed in range(3):
        out = {}
        for tag, overrides, mode in (
            ("top1", dict(quantize_mode="top1"), QuantizeMode.top1()),
            ("fixed10", dict(quantize_mode="fixed", fixed_n=10),
             QuantizeMode.fixed_top_n(10)),
            ("adaptive", dict(quantize_mode="adaptive"), None),
        ):
            cfg = make_config(tmp, f"c4_{seed}_{tag}", seed, **overrides)
            ckpt, _ = run_training(cfg)
            model = load_checkpoint(ckpt).model
            _, val = build_datasets(cfg)
            stats = evaluate_reconstruction(
                model, val, mode if mode else model.adaptive_mode())
            rho = None
            if tag == "adaptive":
                rho = spearman(stats.counts.astype(float), stats.labels)
            out[tag] = (stats.mean_mse, stats.mean_count, rho)
        m1, _, _ = out["top1"]
        m10, _, _ = out["fixed10"]
        ma, ca, rho = out["adaptive"]
        ok4 = m10 < m1 and ma <= m1 and ca < 10
        ok5 = rho >= 0.5
        print(f"  seed {seed}: top1={m1:.5f} fixed10={m10:.5f} "
              f"adaptive={ma:.5f} cnt={ca:.2f} rho={rho:.3f} "
              f"{'OK4' if ok4 else 'FAIL4'} {'OK5' if ok5 else 'FAIL5'}",
              flush=True)
    print(f"  criterion4 rehearsal took {time.time()-t0:.0f}s")


def criterion3(tmp):
    print("--- criterion 3 rehearsal (diversity margins)")
    t0 = time.time()
    for seed in range(3):
        vals = {}
        for lam in (0.0, 0.25):
            cfg = make_config(tmp, f"c3_{seed}_{lam}", seed, lambda_dqp=lam)
            ckpt, _ = run_training(cfg)
            model = load_checkpoint(ckpt).model
            sims = centroid_similarity_matrix(model.codebook)
            off = sims[~np.eye(sims.shape[0], dtype=bool)]
            _, val = build_datasets(cfg)
            stats = evaluate_reconstruction(model, val, model.adaptive_mode())
            vals[lam] = (float(np.mean(np.abs(off))), stats.mean_mse)
        a0, m0 = vals[0.0]
        a1, m1 = vals[0.25]
        ok = (a0 - a1 >= 0.05) and (m1 <= 1.10 * m0)
        print(f"  seed {seed}: |cos| {a0:.3f}->{a1:.3f} margin {a0-a1:+.3f} "
              f"mse {m0:.5f}->{m1:.5f} ratio {m1/m0:.3f} {'OK' if ok else 'FAIL'}",
              flush=True)
    print(f"  criterion3 rehearsal took {time.time()-t0:.0f}s")


if __name__ == "__main__":
    tmp = tempfile.mkdtemp()
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    if which in ("all", "c4"):
        criterion4(tmp)
    if which in ("all", "c3"):
        criterion3(tmp)
