"""Can the allocator fit the ratio targets on frozen features?"""
import sys
import tempfile

import numpy as np

from dynavq.allocator import (
    allocator_backward,
    allocator_forward,
    dpa_loss,
    init_allocator,
    ratio_target,
)
from dynavq.metrics import spearman
from dynavq.pipeline import forward_image
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, init_state, train_step, _batch_images

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_init(params):
    return {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}


def adam_step(params, grads, state, t, lr):
    out = {}
    for k, p in params.items():
        m, v = state[k]
        g = grads[k]
        m = ADAM_B1 * m + (1 - ADAM_B1) * g
        v = ADAM_B2 * v + (1 - ADAM_B2) * g * g
        state[k] = (m, v)
        mh = m / (1 - ADAM_B1**t)
        vh = v / (1 - ADAM_B2**t)
        out[k] = p - lr * mh / (np.sqrt(vh) + ADAM_EPS)
    return out


def main(temperature=0.1, steps=1000, iso_steps=2000, lr=1e-3):
    tmp = tempfile.mkdtemp()
    cfg = TrainConfig(
        total_steps=steps, warmup_fraction=0.25, batch_size=8, learning_rate=1e-3,
        subcodebooks=4, primitives_per_sub=64, primitive_dim=4,
        top_k=16, pool=16, image_size=32, patch_size=4, hidden_dim=32,
        n_images=64, seed=0, temperature=temperature,
        metrics_path=f"{tmp}/m.csv", checkpoint_path=f"{tmp}/c.ckpt",
    )
    train_ds, val_ds = build_datasets(cfg)
    state = init_state(cfg)
    for step in range(steps):
        state, _, _ = train_step(state, _batch_images(train_ds, cfg, step))
    model = state.model

    # frozen (z, target) pairs from the trained model
    feats, targets, labels = [], [], []
    for item in train_ds.items:
        fwd = forward_image(model, item.image, QuantizeMode.adaptive(cfg.top_k))
        feats.append(fwd.embeddings)
        targets.append(ratio_target(fwd.embeddings, fwd.quant.quantized,
                                    cfg.primitives_per_sub))
        labels.append(item.patch_labels.reshape(-1))
    print("train pairs:", len(feats))

    alloc = init_allocator(cfg.embed_dim, 12345)
    params = {"w1": alloc.conv1_w, "b1": alloc.conv1_b,
              "w2": alloc.conv2_w, "b2": alloc.conv2_b}
    opt = adam_init(params)
    rng = np.random.default_rng(7)
    for t in range(1, iso_steps + 1):
        i = int(rng.integers(len(feats)))
        a = type(alloc)(params["w1"], params["b1"], params["w2"], params["b2"])
        ratios, cache = allocator_forward(feats[i], a)
        loss, d_r = dpa_loss(ratios, targets[i])
        grads_a, _ = allocator_backward(d_r, cache, a)
        grads = {"w1": grads_a.conv1_w, "b1": grads_a.conv1_b,
                 "w2": grads_a.conv2_w, "b2": grads_a.conv2_b}
        params = adam_step(params, grads, opt, t, lr)
        if t % 500 == 0:
            print(f"  iso step {t}: loss={loss:.5f}")

    a = type(alloc)(params["w1"], params["b1"], params["w2"], params["b2"])
    all_r, all_t, all_l = [], [], []
    for item in val_ds.items:
        fwd = forward_image(model, item.image, QuantizeMode.adaptive(cfg.top_k))
        r, _ = allocator_forward(fwd.embeddings, a)
        t_ = ratio_target(fwd.embeddings, fwd.quant.quantized, cfg.primitives_per_sub)
        all_r.append(r)
        all_t.append(t_)
        all_l.append(item.patch_labels.reshape(-1))
    r = np.concatenate(all_r)
    t_ = np.concatenate(all_t)
    l = np.concatenate(all_l)
    print(f"isolated fit: spearman(R, target)={spearman(r, t_):.3f} "
          f"spearman(R, label)={spearman(r, l):.3f}")
    for c in range(4):
        sel = l == c
        print(f"  class {c}: R={r[sel].mean():.3f} target={t_[sel].mean():.3f}")


if __name__ == "__main__":
    main(
        temperature=float(sys.argv[1]) if len(sys.argv) > 1 else 0.1,
        steps=int(sys.argv[2]) if len(sys.argv) > 2 else 1000,
        iso_steps=int(sys.argv[3]) if len(sys.argv) > 3 else 2000,
        lr=float(sys.argv[4]) if len(sys.argv) > 4 else 1e-3,
    )
