"""Diagnose the allocator/ratio-target learning chain."""
import sys
import tempfile

import numpy as np

from dynavq.allocator import ratio_target
from dynavq.metrics import evaluate_reconstruction, spearman
from dynavq.pipeline import forward_image
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, init_state, train_step, _batch_images


def train(cfg, steps):
    train_ds, val_ds = build_datasets(cfg)
    state = init_state(cfg)
    for step in range(steps):
        state, row, _ = train_step(state, _batch_images(train_ds, cfg, step))
        if step % 200 == 199:
            print(f"  step {step}: rec={row['loss_rec']:.5f} dpa={row['loss_dpa']:.5f} "
                  f"mean_count={row['mean_count']:.2f} mean_R={row['mean_R']:.3f} "
                  f"mean_Rstar={row['mean_Rstar']:.3f} perp={row['perplexity']:.1f}")
    return state, train_ds, val_ds


def diagnose(temperature, steps=1000, seed=0, top_k=16):
    tmp = tempfile.mkdtemp()
    cfg = TrainConfig(
        total_steps=steps, warmup_fraction=0.25, batch_size=8, learning_rate=1e-3,
        subcodebooks=4, primitives_per_sub=64, primitive_dim=4,
        top_k=top_k, pool=top_k, image_size=32, patch_size=4, hidden_dim=32,
        n_images=64, seed=seed, temperature=temperature,
        metrics_path=f"{tmp}/m.csv", checkpoint_path=f"{tmp}/c.ckpt",
    )
    print(f"=== temperature {temperature}, steps {steps}, seed {seed}")
    state, train_ds, val_ds = train(cfg, steps)
    model = state.model

    errors, ratios, targets, labels, counts = [], [], [], [], []
    for item in val_ds.items:
        fwd = forward_image(model, item.image, QuantizeMode.adaptive(cfg.top_k))
        errors.append(fwd.quant.per_patch_error)
        ratios.append(fwd.ratios)
        targets.append(ratio_target(fwd.embeddings, fwd.quant.quantized,
                                    cfg.primitives_per_sub))
        labels.append(item.patch_labels.reshape(-1))
        counts.append(fwd.quant.alloc.counts)
    errors = np.concatenate(errors)
    ratios = np.concatenate(ratios)
    targets = np.concatenate(targets)
    labels = np.concatenate(labels)
    counts = np.concatenate(counts)

    for c in range(4):
        sel = labels == c
        print(f"  class {c}: n={sel.sum():3d} err={errors[sel].mean():.4f} "
              f"R={ratios[sel].mean():.3f} target={targets[sel].mean():.3f} "
              f"count={counts[sel].mean():.2f}")
    print(f"  spearman(error, label)  = {spearman(errors, labels):.3f}")
    print(f"  spearman(R, target)     = {spearman(ratios, targets):.3f}")
    print(f"  spearman(R, label)      = {spearman(ratios, labels):.3f}")
    try:
        print(f"  spearman(count, label)  = {spearman(counts.astype(float), labels):.3f}")
    except ValueError as e:
        print(f"  spearman(count, label)  undefined: {e}")

    for mode_name, mode in (("top1", QuantizeMode.top1()),
                            ("fixed10", QuantizeMode.fixed_top_n(10)),
                            ("adaptive", model.adaptive_mode())):
        stats = evaluate_reconstruction(model, val_ds, mode)
        print(f"  eval {mode_name}: mse={stats.mean_mse:.5f} count={stats.mean_count:.2f}")


if __name__ == "__main__":
    temp = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1000
    diagnose(temp, steps)
