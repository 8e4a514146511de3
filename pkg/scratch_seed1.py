"""Probe rho(count,label) across seeds and step budgets."""
import sys
import tempfile

import numpy as np

from dynavq.allocator import ratio_target
from dynavq.metrics import evaluate_reconstruction, spearman
from dynavq.pipeline import forward_image
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, init_state, train_step, _batch_images


def probe(seed, total_steps, checkpoints, temperature=0.01, n_images=64, lr=1e-3):
    tmp = tempfile.mkdtemp()
    cfg = TrainConfig(
        total_steps=total_steps, warmup_fraction=0.25, batch_size=8,
        learning_rate=lr, subcodebooks=4, primitives_per_sub=64, primitive_dim=4,
        top_k=16, pool=16, temperature=temperature, image_size=32, patch_size=4,
        hidden_dim=32, n_images=n_images, seed=seed,
        metrics_path=f"{tmp}/m.csv", checkpoint_path=f"{tmp}/c.ckpt",
    )
    train_ds, val_ds = build_datasets(cfg)
    state = init_state(cfg)
    for step in range(total_steps):
        state, _, _ = train_step(state, _batch_images(train_ds, cfg, step))
        if step + 1 in checkpoints:
            model = state.model
            errors, ratios, labels, counts, targets = [], [], [], [], []
            for item in val_ds.items:
                fwd = forward_image(model, item.image, QuantizeMode.adaptive(cfg.top_k))
                errors.append(fwd.quant.per_patch_error)
                ratios.append(fwd.ratios)
                labels.append(item.patch_labels.reshape(-1))
                counts.append(fwd.quant.alloc.counts)
                targets.append(ratio_target(fwd.embeddings, fwd.quant.quantized,
                                            cfg.primitives_per_sub))
            errors = np.concatenate(errors)
            labels = np.concatenate(labels)
            counts = np.concatenate(counts).astype(float)
            targets = np.concatenate(targets)
            cls_t = [targets[labels == c].mean() for c in range(4)]
            print(f"  seed={seed} step={step+1}: rho(e,l)={spearman(errors,labels):+.2f} "
                  f"rho(t,l)={spearman(targets,labels):+.2f} "
                  f"rho(c,l)={spearman(counts,labels):+.2f} cnt={counts.mean():.2f} "
                  f"cls_t=[{cls_t[0]:.2f},{cls_t[1]:.2f},{cls_t[2]:.2f},{cls_t[3]:.2f}]",
                  flush=True)


if __name__ == "__main__":
    seeds = [int(s) for s in sys.argv[1].split(",")] if len(sys.argv) > 1 else [1]
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 3500
    marks = {1500, 2000, 2500, 3000, 3500} & set(range(steps + 1))
    for seed in seeds:
        probe(seed, steps, marks)
