"""Command-line entry point: train / eval / bench / trace.

Flags mirror the run-config fields (underscores become dashes).  A config
file sets the base values, explicit flags override it, and the MNM_SEED
environment variable is the fallback seed when neither provides one.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_to_text, load_config
from .engine import Model, evaluate, run_episode
from .harness import (
    SIMILARITY_PAIRS, bench_rows_to_csv, bench_scaling, bench_write_step,
    fit_loglog_slope, matrix_to_csv, model_from_checkpoint, run_experiment,
    similarity_trace,
)


def _add_config_flags(parser: argparse.ArgumentParser):
    kinds = {"int": int, "float": float, "str": str}
    for f in dataclasses.fields(RunConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}",
                            dest=f.name, type=kinds[f.type], default=None,
                            help=f"config field {f.name}")


def _build_config(args) -> RunConfig:
    cfg = RunConfig()
    seed_in_file = False
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        seed_in_file = any(
            line.split("#", 1)[0].split("=", 1)[0].strip() == "seed"
            for line in text.splitlines() if "=" in line)
        cfg = load_config(args.config, cfg)
    overrides = {f.name: getattr(args, f.name)
                 for f in dataclasses.fields(RunConfig)
                 if getattr(args, f.name) is not None}
    if "seed" not in overrides and not seed_in_file:
        env_seed = os.environ.get("MNM_SEED")
        if env_seed is not None:
            overrides["seed"] = int(env_seed)
    return dataclasses.replace(cfg, **overrides).validate()


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    result = run_experiment(cfg)
    print(f"status={result.status} iterations={result.iterations_run} "
          f"out_dir={result.out_dir}")
    if result.metrics:
        for key, value in result.metrics.items():
            print(f"{key}={value}")
    return 0 if result.status != "diverged" else 1


def _cmd_eval(args) -> int:
    model, cfg, iteration = model_from_checkpoint(args.checkpoint)
    count = args.episodes if args.episodes else cfg.eval_episodes
    metrics = evaluate(model, model.eval_episode_set(count))
    print(f"checkpoint_iteration={iteration}")
    print(f"parameters={model.param_count()}")
    for key, value in metrics.items():
        print(f"{key}={value}")
    return 0


def _cmd_bench(args) -> int:
    variants = args.variants.split(",")
    lengths = [int(x) for x in args.lengths.split(",")]
    rows = bench_scaling(variants, lengths, repeats=args.repeats,
                         seed=args.seed if args.seed is not None else 0)
    csv = bench_rows_to_csv(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv, encoding="utf-8")
    sys.stdout.write(csv)
    for variant in variants:
        print(f"slope[{variant}]={fit_loglog_slope(rows, variant):.3f}")
    if args.write_bench:
        times = bench_write_step()
        print(f"gradient_write_s={times['gradient_write_s']!r}")
        print(f"local_write_s={times['local_write_s']!r}")
    return 0


def _cmd_trace(args) -> int:
    if args.checkpoint:
        model, cfg, _ = model_from_checkpoint(args.checkpoint)
    else:
        cfg = _build_config(args)
        model = Model(cfg)
    rng = np.random.default_rng(cfg.seed)
    episode = model.generate(rng)
    trace, _, _ = run_episode(model, episode, record_vectors=True)
    matrix = similarity_trace(trace, SIMILARITY_PAIRS[args.pair])
    csv = matrix_to_csv(matrix)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv, encoding="utf-8")
    else:
        sys.stdout.write(csv)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mnm",
        description="metalearned neural memory experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model per config")
    p_train.add_argument("--config", default=None, help="key=value file")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=None)

    p_bench = sub.add_parser("bench", help="scaling benchmark")
    p_bench.add_argument("--variants", default="MNM-g,MNM-p,LSTM,LSTM+SALU")
    p_bench.add_argument("--lengths", default="25,50,100,200")
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--out", default=None)
    p_bench.add_argument("--write-bench", action="store_true",
                         help="also time one gradient vs local write")

    p_trace = sub.add_parser("trace", help="similarity matrix from a trace")
    p_trace.add_argument("--config", default=None)
    p_trace.add_argument("--checkpoint", default=None)
    p_trace.add_argument("--pair", choices=sorted(SIMILARITY_PAIRS),
                         default="vr_vw")
    p_trace.add_argument("--out", default=None)
    _add_config_flags(p_trace)

    args = parser.parse_args(argv)
    handlers = {"train": _cmd_train, "eval": _cmd_eval,
                "bench": _cmd_bench, "trace": _cmd_trace}
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        parser.exit(2, f"error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
