"""Second sweep: push rho(count,label) with tau/steps/data size."""
import sys
import tempfile

import numpy as np

from dynavq.allocator import ratio_target
from dynavq.metrics import evaluate_reconstruction, spearman
from dynavq.pipeline import forward_image
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, init_state, train_step, _batch_images


def run(temperature, steps, n_images=64, seed=0, lr=1e-3, beta=0.25, label=""):
    tmp = tempfile.mkdtemp()
    cfg = TrainConfig(
        total_steps=steps, warmup_fraction=0.25, batch_size=8, learning_rate=lr,
        subcodebooks=4, primitives_per_sub=64, primitive_dim=4,
        top_k=16, pool=16, image_size=32, patch_size=4, hidden_dim=32,
        n_images=n_images, seed=seed, temperature=temperature, beta=beta,
        metrics_path=f"{tmp}/m.csv", checkpoint_path=f"{tmp}/c.ckpt",
    )
    train_ds, val_ds = build_datasets(cfg)
    state = init_state(cfg)
    for step in range(steps):
        state, _, _ = train_step(state, _batch_images(train_ds, cfg, step))
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
    ratios = np.concatenate(ratios)
    labels = np.concatenate(labels)
    counts = np.concatenate(counts).astype(float)
    targets = np.concatenate(targets)

    rho_el = spearman(errors, labels)
    rho_tl = spearman(targets, labels)
    rho_rt = spearman(ratios, targets)
    rho_cl = spearman(counts, labels)
    top1 = evaluate_reconstruction(model, val_ds, QuantizeMode.top1()).mean_mse
    fixed10 = evaluate_reconstruction(model, val_ds, QuantizeMode.fixed_top_n(10)).mean_mse
    adap = evaluate_reconstruction(model, val_ds, model.adaptive_mode())
    print(
        f"{label} t={temperature} steps={steps} n={n_images} b={beta} seed={seed}: "
        f"rho(e,l)={rho_el:+.2f} rho(t,l)={rho_tl:+.2f} rho(R,t)={rho_rt:+.2f} "
        f"rho(c,l)={rho_cl:+.2f} | top1={top1:.4f} f10={fixed10:.4f} "
        f"adap={adap.mean_mse:.4f} cnt={adap.mean_count:.1f}",
        flush=True,
    )


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "a"
    if which == "a":
        run(0.02, 3000)
        run(0.01, 1500)
        run(0.01, 3000)
    elif which == "b":
        run(0.02, 3000, n_images=128)
        run(0.01, 3000, n_images=128)
    elif which == "c":
        run(0.02, 1500, beta=1.0)
        run(0.01, 3000, beta=1.0)
