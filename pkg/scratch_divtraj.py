"""Track the centroid |cos| trajectory under the diversity loss."""
import sys
import tempfile

import numpy as np

from dynavq.metrics import centroid_similarity_matrix, evaluate_reconstruction
from dynavq.quantizer import QuantizeMode
from dynavq.trainer import TrainConfig, build_datasets, init_state, train_step, _batch_images

def mean_abs_off(cb):
    sims = centroid_similarity_matrix(cb)
    off = sims[~np.eye(sims.shape[0], dtype=bool)]
    return float(np.mean(np.abs(off))), float(np.mean(off))


def run(seed, lam, subs, dim, steps, top_k=16, prims=64, lr=1e-3):
    tmp = tempfile.mkdtemp()
    cfg = TrainConfig(
        total_steps=steps, warmup_fraction=0.25, batch_size=8, learning_rate=lr,
        subcodebooks=subs, primitives_per_sub=prims, primitive_dim=dim,
        top_k=top_k, pool=top_k, image_size=32, patch_size=4,
        hidden_dim=32, n_images=64, seed=seed, lambda_dqp=lam,
        metrics_path=f"{tmp}/m.csv", checkpoint_path=f"{tmp}/c.ckpt",
    )
    train, val = build_datasets(cfg)
    state = init_state(cfg)
    traj = []
    for step in range(steps):
        batch = _batch_images(train, cfg, step)
        state, row, _ = train_step(state, batch)
        if step % 100 == 99 or step == steps - 1:
            a, s = mean_abs_off(state.model.codebook)
            traj.append((step, a, s))
    stats = evaluate_reconstruction(state.model, val, QuantizeMode.adaptive(cfg.top_k))
    return traj, stats.mean_mse


if __name__ == "__main__":
    subs = int(sys.argv[1]) if len(sys.argv) > 1 else 4
    dim = int(sys.argv[2]) if len(sys.argv) > 2 else 4
    steps = int(sys.argv[3]) if len(sys.argv) > 3 else 1000
    for seed in range(3):
        for lam in (0.0, 0.25):
            traj, mse = run(seed, lam, subs, dim, steps)
            tail = "  ".join(f"{s}:{a:.3f}/{m:+.3f}" for s, a, m in traj)
            print(f"M={subs} D'={dim} seed={seed} lam={lam}: mse={mse:.5f}")
            print(f"   traj(|cos|/signed): {tail}")
