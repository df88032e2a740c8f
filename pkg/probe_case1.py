"""Desk probe: case-1 dictionary convergence for all four variants."""
import json
import time

from mnm.config import RunConfig
from mnm.engine import Model, evaluate, train_update

results = {}
for variant in ("LSTM", "LSTM+SALU", "MNM-g", "MNM-p"):
    cfg = RunConfig(variant=variant, task="dictionary", k=4, l=1,
                    d_i=32, d_h=32, d_o=32, d_k=32, d_v=32, hidden=32,
                    batch=32, seed=0, lr=0.001, clip=10.0)
    model = Model(cfg)
    eval_set = model.eval_episode_set(128)
    t0 = time.perf_counter()
    hit = None
    for it in range(1, 20001):
        eps = [model.generate(model.train_rng) for _ in range(cfg.batch)]
        train_update(model, eps)
        if it % 250 == 0:
            ev = evaluate(model, eval_set)
            print(f"{variant} it={it} t={time.perf_counter()-t0:.0f}s "
                  f"task={ev['task_loss']:.4f} seq={ev['seq_acc']:.3f}",
                  flush=True)
            if ev["seq_acc"] >= 0.95:
                hit = it
                break
    results[variant] = {"hit": hit, "secs": time.perf_counter() - t0}
    print(json.dumps({variant: results[variant]}), flush=True)
print("FINAL", json.dumps(results), flush=True)
