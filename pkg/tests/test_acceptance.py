"""Acceptance criteria, one test per criterion, one printed line each.

Training-based criteria (3, 4, 5) and the wallclock benchmark (6) are
marked slow; run them with ``pytest -m slow`` or the full suite with
``pytest``.  Tolerances are pinned here, not configurable.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from mnm import memory, tasks
from mnm.autodiff import Tape, Tensor, grad, mul, sum_all, watch
from mnm.config import RunConfig
from mnm.engine import Model, evaluate, run_episode, train_update
from mnm.harness import (
    bench_scaling, bench_write_step, fit_loglog_slope, load_checkpoint,
    run_experiment, strip_wallclock,
)

from oracles import fd_grad, max_rel_err
from test_autodiff import op_cases


def report(num: int, ok: bool, detail: str):
    print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient integrity
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    worst_first = 0.0
    for name, (fn, arrays) in op_cases().items():
        def forward_value(arrs):
            from mnm.autodiff import suspend_recording
            with suspend_recording():
                out = fn(*[Tensor(a) for a in arrs])
            w = np.linspace(0.5, 1.5, out.data.size).reshape(out.data.shape)
            return float((out.data * w).sum())

        with Tape() as t:
            leaves = [t.leaf(a) for a in arrays]
            out = fn(*leaves)
            w = Tensor(np.linspace(0.5, 1.5, out.data.size).reshape(out.data.shape))
            analytic = [g.data for g in grad(sum_all(mul(out, w)), leaves)]
        numeric = fd_grad(forward_value, arrays)
        for a, n in zip(analytic, numeric):
            worst_first = max(worst_first, max_rel_err(a, n, floor=1e-4))

    # second order through one gradient write on a net with dims <= 8
    rng = np.random.default_rng(1)
    base = memory.init_layers(rng, 6, 6, 6, 3)
    key = rng.uniform(-1, 1, (1, 6))
    theta0 = rng.uniform(-0.5, 0.5, (6, 6))
    h = rng.uniform(-1, 1, (1, 6))

    def post_update_loss(theta, want_grad=False):
        from mnm.autodiff import matmul, tanh
        with Tape() as t:
            th = t.leaf(theta)
            val = tanh(matmul(Tensor(h), th))
            mem = memory.MemoryParams(
                layers=[watch(m) for m in memory.reset(base, 1).layers])
            out = memory.write_gradient(mem, [Tensor(key)], [val], 0.5,
                                        track_higher_order=True)
            root = sum_all(out.loss_after)
            if want_grad:
                return grad(root, [th])[0].data
            return float(root.data)

    analytic = post_update_loss(theta0, want_grad=True)
    numeric = fd_grad(lambda arrs: post_update_loss(arrs[0]), [theta0])[0]
    worst_second = max_rel_err(analytic, numeric, floor=1e-3)
    elapsed = time.perf_counter() - t0
    report(1, worst_first < 1e-5 and worst_second < 1e-3 and elapsed < 60,
           f"first-order rel err {worst_first:.2e} < 1e-5, "
           f"second-order through a write {worst_second:.2e} < 1e-3, "
           f"runtime {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# 2. exact algebraic invariants
# ---------------------------------------------------------------------------

def test_criterion_2_exact_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    checks = []

    base = memory.init_layers(rng, 8, 8, 8, 3)
    params = memory.reset(base, 2)
    keys = [Tensor(rng.uniform(-1, 1, (2, 8)))]
    vals = [Tensor(rng.uniform(-1, 1, (2, 8)))]
    fb_arrays = memory.init_feedback(rng, 8, [8, 8, 8])
    fb = memory.FeedbackParams(
        weights=[Tensor(fb_arrays[f"fb_w{l}"]) for l in range(2)],
        biases=[Tensor(fb_arrays[f"fb_b{l}"]) for l in range(2)],
        rate_gates=[Tensor(fb_arrays[f"fb_rate{l}"]) for l in range(3)])

    # zero-rate writes are exact no-ops
    g0 = memory.write_gradient(params, keys, vals, 0.0)
    p0 = memory.write_local(params, fb, keys, vals, 0.0)
    checks.append(("zero-rate no-op", all(
        np.array_equal(a.data, b.data)
        for out in (g0, p0)
        for a, b in zip(out.params.layers, params.layers))))

    # perceptron fixed point: forward activations as predictions
    _, zs = memory.forward(params, keys[0], keep_activations=True)
    real_predict = memory.predict_feedback
    memory.predict_feedback = lambda fb_, tv, n: [
        Tensor(z.data.reshape(z.data.shape[0], -1)) for z in zs[1:]]
    try:
        fixed = memory.write_local(params, fb, keys,
                                   [Tensor(zs[-1].data[:, :, 0])], 1.0)
    finally:
        memory.predict_feedback = real_predict
    checks.append(("perceptron fixed point", all(
        np.array_equal(a.data, b.data)
        for a, b in zip(fixed.params.layers, params.layers))))

    # local updates commute across layer application order
    orders = [(0, 1, 2), (2, 0, 1), (1, 2, 0)]
    outs = [memory.write_local(params, fb, keys, vals, 0.6,
                               layer_order=o).params for o in orders]
    checks.append(("layer-order commutativity", all(
        np.array_equal(a.data, b.data)
        for other in outs[1:] for a, b in zip(outs[0].layers, other.layers))))

    # hard-location equivalence: one gradient write on the linear output
    # layer of a binary-addressed 2-layer memory == additive update + the
    # self-correction term, exactly
    d_k, d_v, n_loc = 8, 4, 8
    address = rng.choice([-1.0, 1.0], size=(n_loc, d_k))
    content = rng.uniform(-1, 1, (d_v, n_loc))
    key = address[1].copy()
    value = rng.uniform(-1, 1, d_v)
    two_layer = memory.MemoryParams(
        layers=[Tensor(address[None].copy()), Tensor(content[None].copy())],
        activations=[("binary", 2.0), "identity"])
    act = memory.sdm_activation(
        memory.SdmState(address=address, content=content.copy(),
                        threshold=2.0), key)
    v_hat = content @ act
    out = memory.write_gradient(two_layer, [Tensor(key[None])],
                                [Tensor(value[None])], d_v / 2.0)
    delta = out.params.layers[1].data[0] - content
    expected = np.outer(value, act) - np.outer(v_hat, act)
    sdm_err = float(np.max(np.abs(delta - expected)))
    checks.append((f"hard-location equivalence ({sdm_err:.1e} <= 1e-12)",
                   sdm_err <= 1e-12))

    # meta objective at delay 0 is exactly the mean of post-write losses
    cfg = RunConfig(variant="MNM-g", task="dictionary", k=2, l=1,
                    d_i=8, d_h=8, d_o=8, d_k=8, d_v=8, hidden=8,
                    batch=1, seed=3)
    model = Model(cfg)
    trace, _, meta = run_episode(model, model.generate(model.train_rng))
    mean_after = 0.0
    for step in trace.steps:
        mean_after += step.loss_after[0, 0]
    mean_after /= trace.length
    checks.append(("meta == mean(loss_after)",
                   meta.data.item() == mean_after))

    elapsed = time.perf_counter() - t0
    ok = all(flag for _, flag in checks) and elapsed < 60
    report(2, ok, "; ".join(name for name, _ in checks)
           + f"; runtime {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# 3-5. desk-scale convergence
# ---------------------------------------------------------------------------

def case1_config(variant, tmp_path, seed=0):
    return RunConfig(variant=variant, task="dictionary", k=4, l=1,
                     d_i=32, d_h=32, d_o=32, d_k=32, d_v=32, hidden=32,
                     batch=32, iterations=20000, eval_interval=250,
                     eval_episodes=128, seed=seed, lr=0.001, clip=10.0,
                     stop_seq_acc=0.95,
                     out_dir=str(tmp_path / f"case1-{variant}-{seed}"))


@pytest.mark.slow
def test_criterion_3_dictionary_case1_all_variants(tmp_path):
    lines = []
    ok = True
    for variant in ("LSTM", "LSTM+SALU", "MNM-g", "MNM-p"):
        cfg = case1_config(variant, tmp_path)
        t0 = time.perf_counter()
        result = run_experiment(cfg)
        mins = (time.perf_counter() - t0) / 60
        hit = (result.status == "stopped_early"
               and result.metrics["seq_acc"] >= 0.95)
        ok = ok and hit
        lines.append(f"{variant} seq_acc={result.metrics['seq_acc']:.3f} "
                     f"at iter {result.iterations_run} ({mins:.1f} min)")
    report(3, ok, "; ".join(lines))


def case2_config(variant, tmp_path, seed, iterations=50000, stop=0.90):
    return RunConfig(variant=variant, task="dictionary", k=8, l=4,
                     d_i=64, d_h=64, d_o=64, d_k=64, d_v=64, hidden=64,
                     batch=16, iterations=iterations, eval_interval=250,
                     eval_episodes=128, seed=seed, lr=0.001, clip=10.0,
                     stop_seq_acc=stop,
                     out_dir=str(tmp_path / f"case2-{variant}-{seed}"))


@pytest.mark.slow
def test_criterion_4_dictionary_case2_ordering(tmp_path):
    seeds = (0, 1, 2)
    good_seeds = 0
    lines = []
    for seed in seeds:
        budget = 0
        mnm_ok = True
        for variant in ("MNM-g", "MNM-p"):
            cfg = case2_config(variant, tmp_path, seed)
            result = run_experiment(cfg)
            hit = (result.status == "stopped_early"
                   and result.metrics["seq_acc"] >= 0.90)
            mnm_ok = mnm_ok and hit
            budget = max(budget, result.iterations_run)
            lines.append(f"s{seed} {variant} seq={result.metrics['seq_acc']:.3f}"
                         f"@{result.iterations_run}")
        lstm_cfg = dataclasses.replace(
            case2_config("LSTM", tmp_path, seed, iterations=budget,
                         stop=-1.0), stop_seq_acc=-1.0)
        result = run_experiment(lstm_cfg)
        metrics_text = Path(lstm_cfg.out_dir, "metrics.csv").read_text()
        lstm_max = max(float(line.split(",")[4])
                       for line in metrics_text.splitlines()[1:])
        lines.append(f"s{seed} LSTM max_seq={lstm_max:.3f}@{budget}")
        if mnm_ok and lstm_max < 0.5:
            good_seeds += 1
    report(4, good_seeds >= 2,
           f"ordering held on {good_seeds}/3 seeds; " + "; ".join(lines))


@pytest.mark.slow
def test_criterion_5_double_copy(tmp_path):
    lines = []
    ok = True
    for variant in ("MNM-g", "MNM-p"):
        cfg = RunConfig(variant=variant, task="double_copy", length=20,
                        alphabet=10, d_i=32, d_h=32, d_o=32, d_k=32,
                        d_v=32, hidden=32, batch=32, iterations=30000,
                        eval_interval=250, eval_episodes=64, seed=0,
                        lr=0.001, clip=10.0, stop_token_acc=0.95,
                        out_dir=str(tmp_path / f"copy-{variant}"))
        result = run_experiment(cfg)
        hit = (result.status == "stopped_early"
               and result.metrics["token_acc"] >= 0.95)
        ok = ok and hit
        lines.append(f"{variant} token_acc={result.metrics['token_acc']:.3f} "
                     f"at iter {result.iterations_run}")
    report(5, ok, "; ".join(lines))


# ---------------------------------------------------------------------------
# 6-7. scaling shape and memory footprint
# ---------------------------------------------------------------------------

LENGTHS = (25, 50, 100, 200)


@pytest.fixture(scope="module")
def bench_rows():
    return bench_scaling(["MNM-p", "LSTM+SALU"], LENGTHS, repeats=3, seed=0)


@pytest.mark.slow
def test_criterion_6_scaling_shape(bench_rows):
    salu_slope = fit_loglog_slope(bench_rows, "LSTM+SALU")
    mnm_slope = fit_loglog_slope(bench_rows, "MNM-p")
    writes = bench_write_step(hidden=100, layers=3, repeats=30)
    ok = (salu_slope >= 1.7 and mnm_slope <= 1.3
          and writes["local_write_s"] < writes["gradient_write_s"])
    report(6, ok,
           f"slope[LSTM+SALU]={salu_slope:.2f} >= 1.7, "
           f"slope[MNM-p]={mnm_slope:.2f} <= 1.3, "
           f"local write {writes['local_write_s']*1e3:.2f}ms < "
           f"gradient write {writes['gradient_write_s']*1e3:.2f}ms")


@pytest.mark.slow
def test_criterion_7_memory_footprint(bench_rows):
    cfg = RunConfig()
    by = {(r["variant"], r["length"]): r["memory_scalars"]
          for r in bench_rows}
    mnm_counts = {by[("MNM-p", n)] for n in LENGTHS}
    salu_exact = all(
        by[("LSTM+SALU", n)] == n * cfg.heads * (cfg.d_k + cfg.d_v)
        for n in LENGTHS)
    report(7, len(mnm_counts) == 1 and salu_exact,
           f"neural-memory scalars constant ({mnm_counts}); slot-table "
           f"scalars == T*H*(d_k+d_v) at every length")


# ---------------------------------------------------------------------------
# 8. one-shot recall
# ---------------------------------------------------------------------------

def test_criterion_8_one_shot_recall():
    d = 8
    rate = 0.5
    drop1, drop10, monotone = [], [], 0
    n_seeds = 1000
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        base = memory.init_layers(rng, d, d, d, 3)
        params = memory.reset(base, 1)
        keys = [Tensor(rng.uniform(-1, 1, (1, d)))]
        vals = [Tensor(rng.uniform(-1, 1, (1, d)))]
        start = memory.memory_loss(params, keys, vals).data.item()
        prev, ok = start, True
        seq = []
        for _ in range(10):
            out = memory.write_gradient(params, keys, vals, rate)
            params = out.params
            cur = out.loss_after.data.item()
            if cur > prev + 1e-15:
                ok = False
            prev = cur
            seq.append(cur)
        drop1.append(1.0 - seq[0] / start)
        drop10.append(1.0 - seq[-1] / start)
        monotone += ok
    m1, m10, frac = (float(np.mean(drop1)), float(np.mean(drop10)),
                     monotone / n_seeds)
    report(8, m1 >= 0.25 and m10 >= 0.90 and frac >= 0.95,
           f"mean 1-write drop {m1:.3f} >= 0.25, mean 10-write drop "
           f"{m10:.3f} >= 0.90, monotone on {frac:.3f} >= 0.95 of "
           f"{n_seeds} seeds")


# ---------------------------------------------------------------------------
# 9. determinism and persistence
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_persistence(tmp_path):
    def cfg_for(out, iterations, resume=""):
        return RunConfig(variant="MNM-g", task="dictionary", k=2, l=1,
                         d_i=8, d_h=8, d_o=8, d_k=8, d_v=8, hidden=8,
                         batch=4, iterations=iterations, eval_interval=2,
                         eval_episodes=8, seed=7, out_dir=str(out),
                         resume=resume)

    run_experiment(cfg_for(tmp_path / "a", 6))
    run_experiment(cfg_for(tmp_path / "b", 6))
    identical = (strip_wallclock(tmp_path / "a" / "metrics.csv")
                 == strip_wallclock(tmp_path / "b" / "metrics.csv"))

    run_experiment(cfg_for(tmp_path / "c", 3))
    run_experiment(cfg_for(tmp_path / "c", 6,
                           resume=str(tmp_path / "c" / "checkpoint.mnmc")))
    resumed_matches = (strip_wallclock(tmp_path / "c" / "metrics.csv")
                       == strip_wallclock(tmp_path / "a" / "metrics.csv"))
    a = load_checkpoint(tmp_path / "a" / "checkpoint.mnmc")
    c = load_checkpoint(tmp_path / "c" / "checkpoint.mnmc")
    params_equal = all(np.array_equal(a.params[n], c.params[n])
                       for n in a.params) and a.rng_state == c.rng_state
    report(9, identical and resumed_matches and params_equal,
           f"same-seed metrics bit-identical (wallclock column aside)="
           f"{identical}, resumed run reproduces uninterrupted metrics="
           f"{resumed_matches}, final parameters and rng state equal="
           f"{params_equal}")
