"""Sweep temperature/beta for class-error ordering and correlations."""
import sys
import tempfile

import numpy as np

from dynavq.allocator import ratio_target
from dynavq.metrics import evaluate_reconstruction, spearman
from dynavq.pipeline import forward_image
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, init_state, train_step, _batch_images


def run(temperature, beta, steps, seed=0, lr=1e-3, top_k=16, hidden=32):
    tmp = tempfile.mkdtemp()
    cfg = TrainConfig(
        total_steps=steps, warmup_fraction=0.25, batch_size=8, learning_rate=lr,
        subcodebooks=4, primitives_per_sub=64, primitive_dim=4,
        top_k=top_k, pool=top_k, image_size=32, patch_size=4, hidden_dim=hidden,
        n_images=64, seed=seed, temperature=temperature, beta=beta,
        metrics_path=f"{tmp}/m.csv", checkpoint_path=f"{tmp}/c.ckpt",
    )
    train_ds, val_ds = build_datasets(cfg)
    state = init_state(cfg)
    for step in range(steps):
        state, _, _ = train_step(state, _batch_images(train_ds, cfg, step))
    model = state.model

    errors, ratios, labels, counts = [], [], [], []
    for item in val_ds.items:
        fwd = forward_image(model, item.image, QuantizeMode.adaptive(cfg.top_k))
        errors.append(fwd.quant.per_patch_error)
        ratios.append(fwd.ratios)
        labels.append(item.patch_labels.reshape(-1))
        counts.append(fwd.quant.alloc.counts)
    errors = np.concatenate(errors)
    ratios = np.concatenate(ratios)
    labels = np.concatenate(labels)
    counts = np.concatenate(counts).astype(float)

    cls_err = [errors[labels == c].mean() for c in range(4)]
    rho_el = spearman(errors, labels)
    rho_cl = spearman(counts, labels) if len(set(counts)) > 1 else float("nan")
    top1 = evaluate_reconstruction(model, val_ds, QuantizeMode.top1()).mean_mse
    fixed10 = evaluate_reconstruction(model, val_ds, QuantizeMode.fixed_top_n(10)).mean_mse
    adap = evaluate_reconstruction(model, val_ds, model.adaptive_mode())
    print(
        f"t={temperature:<5} b={beta:<4} steps={steps} seed={seed}: "
        f"cls_err=[{cls_err[0]:.4f},{cls_err[1]:.4f},{cls_err[2]:.4f},{cls_err[3]:.4f}] "
        f"rho(e,l)={rho_el:+.2f} rho(c,l)={rho_cl:+.2f} "
        f"| top1={top1:.4f} f10={fixed10:.4f} adap={adap.mean_mse:.4f} cnt={adap.mean_count:.1f}"
    )


if __name__ == "__main__":
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
    for temperature in (0.3, 0.1, 0.05, 0.02):
        run(temperature, 0.25, steps)
