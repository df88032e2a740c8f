"""Embedding/lr grid for case-1 dictionary at 32 dims."""
import time

import numpy as np

from mnm.config import RunConfig
from mnm.engine import Model, evaluate, train_update


def embed_init(model, kind, scale):
    shape = model.store.params["emb"].shape
    if kind == "identity":
        e = np.zeros(shape)
        np.fill_diagonal(e, scale)
        model.store.params["emb"] = e
    elif kind == "uniform":
        rng = np.random.default_rng(12345)
        model.store.params["emb"] = rng.uniform(-scale, scale, shape)


def run(variant, lr, emb_kind, emb_scale, clip=10.0, max_iters=20000, seed=0):
    cfg = RunConfig(variant=variant, task="dictionary", k=4, l=1,
                    d_i=32, d_h=32, d_o=32, d_k=32, d_v=32, hidden=32,
                    batch=32, seed=seed, lr=lr, clip=clip)
    model = Model(cfg)
    embed_init(model, emb_kind, emb_scale)
    eval_set = model.eval_episode_set(128)
    tag = f"{variant} lr={lr} emb={emb_kind}:{emb_scale} clip={clip} seed={seed}"
    best = 0.0
    t0 = time.perf_counter()
    for it in range(1, max_iters + 1):
        eps = [model.generate(model.train_rng) for _ in range(cfg.batch)]
        train_update(model, eps)
        if it % 500 == 0:
            ev = evaluate(model, eval_set)
            best = max(best, ev["seq_acc"])
            if it % 2000 == 0:
                print(f"  {tag} it={it} task={ev['task_loss']:.3f} "
                      f"seq={ev['seq_acc']:.3f}", flush=True)
            if ev["seq_acc"] >= 0.95:
                print(f"HIT {tag} at it={it} ({time.perf_counter()-t0:.0f}s)",
                      flush=True)
                return it
    print(f"MISS {tag} best={best:.3f}", flush=True)
    return None


jobs = [
    ("LSTM", 0.001, "identity", 1.0, 10.0),
    ("LSTM", 0.003, "identity", 1.0, 10.0),
    ("LSTM", 0.002, "uniform", 1.0, 10.0),
    ("LSTM", 0.001, "uniform", 2.0, 10.0),
    ("LSTM", 0.001, "uniform", 1.0, 1.0),
]
for variant, lr, kind, scale, clip in jobs:
    run(variant, lr, kind, scale, clip)
