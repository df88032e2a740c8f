"""Forget-bias / lr probe for the LSTM on case-1 dictionary at 32 dims."""
import time

import numpy as np

from mnm.config import RunConfig
from mnm.engine import Model, evaluate, train_update


def run(variant, lr, emb_scale, forget_bias, beta2=0.999, clip=10.0,
        max_iters=20000, seed=0):
    cfg = RunConfig(variant=variant, task="dictionary", k=4, l=1,
                    d_i=32, d_h=32, d_o=32, d_k=32, d_v=32, hidden=32,
                    batch=32, seed=seed, lr=lr, clip=clip, beta2=beta2)
    model = Model(cfg)
    rng = np.random.default_rng(12345)
    model.store.params["emb"] = rng.uniform(
        -emb_scale, emb_scale, model.store.params["emb"].shape)
    model.store.params["lstm_b"][0, 32:64] = forget_bias
    eval_set = model.eval_episode_set(128)
    tag = (f"{variant} lr={lr} emb={emb_scale} fb={forget_bias} "
           f"b2={beta2} clip={clip} seed={seed}")
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
    ("LSTM", 0.001, 1.0, 2.0, 0.999),
    ("LSTM", 0.001, 1.0, 3.0, 0.999),
    ("LSTM", 0.002, 1.0, 2.0, 0.999),
    ("LSTM", 0.001, 1.0, 2.0, 0.98),
    ("LSTM", 0.002, 1.0, 3.0, 0.98),
]
for variant, lr, emb, fb, b2 in jobs:
    run(variant, lr, emb, fb, b2)
