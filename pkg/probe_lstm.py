"""LSTM hyperparameter probe for dictionary case 1 at 32 dims."""
import itertools
import time

import numpy as np

from mnm.config import RunConfig
from mnm.engine import Model, evaluate, train_update

def run(lr, emb_scale, clip, max_iters=20000, seed=0):
    cfg = RunConfig(variant="LSTM", task="dictionary", k=4, l=1,
                    d_i=32, d_h=32, d_o=32, d_k=32, d_v=32, hidden=32,
                    batch=32, seed=seed, lr=lr, clip=clip)
    model = Model(cfg)
    if emb_scale is not None:
        rng = np.random.default_rng(12345)
        model.store.params["emb"] = rng.uniform(
            -emb_scale, emb_scale, model.store.params["emb"].shape)
    eval_set = model.eval_episode_set(128)
    best = 0.0
    t0 = time.perf_counter()
    for it in range(1, max_iters + 1):
        eps = [model.generate(model.train_rng) for _ in range(cfg.batch)]
        train_update(model, eps)
        if it % 500 == 0:
            ev = evaluate(model, eval_set)
            best = max(best, ev["seq_acc"])
            if it % 2000 == 0:
                print(f"  lr={lr} emb={emb_scale} clip={clip} it={it} "
                      f"task={ev['task_loss']:.3f} seq={ev['seq_acc']:.3f}",
                      flush=True)
            if ev["seq_acc"] >= 0.95:
                print(f"HIT lr={lr} emb={emb_scale} clip={clip} at it={it} "
                      f"({time.perf_counter()-t0:.0f}s)", flush=True)
                return it
    print(f"MISS lr={lr} emb={emb_scale} clip={clip} best={best:.3f}", flush=True)
    return None

for lr, emb in [(0.001, 1.0), (0.003, 1.0), (0.003, None), (0.01, 1.0)]:
    run(lr, emb, 10.0)
