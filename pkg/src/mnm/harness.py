"""Experiment runner: training loop, metrics, checkpoints, benchmarks.

Metrics are CSV rows appended at iteration 0 and every eval interval; all
columns except the wallclock one are deterministic functions of the config
and seed.  Checkpoints are a little-endian binary record (magic "MNMC")
holding the config echo, named parameter tensors, optimizer state, the
iteration counter and the training rng state, guarded by a trailing CRC so
a truncated file is rejected before any state is applied.
"""

from __future__ import annotations

import json
import os
import struct
import time
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, config_to_text, parse_config_text
from .engine import Model, TrainingDiverged, evaluate, memory_scalar_count, train_update


class CheckpointError(Exception):
    """Corrupt, truncated, or incompatible checkpoint file."""


METRICS_HEADER = "iteration,task_loss,meta_loss,token_acc,seq_acc,wallclock"


class MetricsWriter:
    """Append-only CSV metrics log, one row per evaluation."""

    def __init__(self, path: str | Path, resume: bool = False):
        self.path = Path(path)
        if resume and self.path.exists():
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(METRICS_HEADER + "\n", encoding="utf-8")

    def append(self, iteration: int, metrics: dict, wallclock: float):
        row = (f"{iteration},{metrics['task_loss']!r},{metrics['meta_loss']!r},"
               f"{metrics['token_acc']!r},{metrics['seq_acc']!r},"
               f"{wallclock:.3f}\n")
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(row)


def strip_wallclock(path: str | Path) -> str:
    """Metrics file content without the (non-deterministic) last column."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        out.append(line.rsplit(",", 1)[0])
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"MNMC"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def _pack_array(buf: bytearray, arr: np.ndarray):
    code = _DTYPE_CODES[arr.dtype]
    buf += struct.pack("<BB", code, arr.ndim)
    buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        code, ndim = self.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = self.unpack(f"<{ndim}Q")
        dtype = _CODE_DTYPES[code]
        raw = self.take(int(np.prod(shape)) * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(
            np.float64 if code == 0 else np.float32)


def save_checkpoint(path: str | Path, cfg: RunConfig, model: Model,
                    iteration: int):
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", _VERSION)
    cfg_bytes = config_to_text(cfg).encode("utf-8")
    buf += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    buf += struct.pack("<Q", iteration)
    store = model.store
    buf += struct.pack("<I", len(store.params))
    for name, arr in store.params.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        _pack_array(buf, arr)
    buf += struct.pack("<Q", store.step)
    for name in store.params:
        _pack_array(buf, store.m[name])
        _pack_array(buf, store.v[name])
    rng_json = json.dumps(model.train_rng.bit_generator.state,
                          sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(rng_json)) + rng_json
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config_text: str
    iteration: int
    params: dict[str, np.ndarray]
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    rng_state: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch (corrupt or truncated file)")
    r = _Reader(blob[:-4])
    r.take(4)
    (version,) = r.unpack("<I")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    (iteration,) = r.unpack("<Q")
    (n_params,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        params[name] = r.array()
    (step,) = r.unpack("<Q")
    m, v = {}, {}
    for name in params:
        m[name] = r.array()
        v[name] = r.array()
    (rng_len,) = r.unpack("<I")
    rng_state = json.loads(r.take(rng_len).decode("utf-8"))
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(config_text=config_text, iteration=iteration,
                      params=params, step=step, m=m, v=v,
                      rng_state=rng_state)


def apply_checkpoint(model: Model, ckpt: Checkpoint) -> int:
    """Install checkpoint state into a freshly built model; returns iteration."""
    store = model.store
    if set(ckpt.params) != set(store.params):
        raise CheckpointError("checkpoint parameters do not match the model")
    for name, arr in ckpt.params.items():
        if arr.shape != store.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        store.params[name] = arr.astype(model.cfg.dtype)
        store.m[name] = ckpt.m[name].astype(model.cfg.dtype)
        store.v[name] = ckpt.v[name].astype(model.cfg.dtype)
    store.step = ckpt.step
    model.train_rng.bit_generator.state = ckpt.rng_state
    return ckpt.iteration


def _configs_compatible(a: RunConfig, b: RunConfig):
    ignore = {"iterations", "out_dir", "resume", "stop_seq_acc",
              "stop_token_acc", "jobs"}
    for f in a.__dataclass_fields__:
        if f in ignore:
            continue
        if getattr(a, f) != getattr(b, f):
            raise CheckpointError(
                f"checkpoint config differs on {f!r}: "
                f"{getattr(b, f)!r} vs {getattr(a, f)!r}")


def model_from_checkpoint(path: str | Path) -> tuple[Model, RunConfig, int]:
    ckpt = load_checkpoint(path)
    cfg = parse_config_text(ckpt.config_text)
    model = Model(cfg)
    iteration = apply_checkpoint(model, ckpt)
    return model, cfg, iteration


# ---------------------------------------------------------------------------
# experiment loop
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    status: str                # "ok", "stopped_early", or "diverged"
    iterations_run: int
    metrics: dict | None
    out_dir: str


def run_experiment(cfg: RunConfig) -> RunResult:
    """Train per config; write metrics/checkpoint artifacts; deterministic."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")

    model = Model(cfg)
    start_iter = 0
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        _configs_compatible(cfg, parse_config_text(ckpt.config_text))
        start_iter = apply_checkpoint(model, ckpt)

    writer = MetricsWriter(out / "metrics.csv", resume=start_iter > 0)
    eval_set = model.eval_episode_set(cfg.eval_episodes)
    t0 = time.perf_counter()
    last_metrics: dict | None = None

    def do_eval(iteration: int) -> dict:
        metrics = evaluate(model, eval_set)
        writer.append(iteration, metrics, time.perf_counter() - t0)
        return metrics

    def hit_target(metrics: dict) -> bool:
        if cfg.stop_seq_acc >= 0 and metrics["seq_acc"] >= cfg.stop_seq_acc:
            return True
        if cfg.stop_token_acc >= 0 and metrics["token_acc"] >= cfg.stop_token_acc:
            return True
        return False

    status = "ok"
    iteration = start_iter
    if start_iter == 0:
        last_metrics = do_eval(0)
        if cfg.iterations > 0 and hit_target(last_metrics):
            status = "stopped_early"
    try:
        while iteration < cfg.iterations and status == "ok":
            batch = [model.generate(model.train_rng)
                     for _ in range(cfg.batch)]
            train_update(model, batch)
            iteration += 1
            if iteration % cfg.eval_interval == 0:
                last_metrics = do_eval(iteration)
                if hit_target(last_metrics):
                    status = "stopped_early"
    except TrainingDiverged as exc:
        status = "diverged"
        diag = dict(exc.diagnostics)
        diag["iteration"] = iteration + 1
        (out / "diagnostics.txt").write_text(
            "".join(f"{k}={v}\n" for k, v in sorted(diag.items())),
            encoding="utf-8")
    save_checkpoint(out / "checkpoint.mnmc", cfg, model, iteration)
    return RunResult(status=status, iterations_run=iteration,
                     metrics=last_metrics, out_dir=str(out))


# ---------------------------------------------------------------------------
# scaling benchmark
# ---------------------------------------------------------------------------

def _bench_episode(model: Model, n_tokens: int, rng: np.random.Generator):
    """Training-mode forward (write+read per step, no backward); timed."""
    from . import controller as ctrl
    from . import memory as mem_mod
    from .autodiff import Tape, watch
    from .baselines import SlotTable
    from .engine import _encode_input, model_step

    cfg = model.cfg
    tokens = rng.integers(0, model.vocab, size=(n_tokens, 1))
    t0 = time.perf_counter()
    with Tape() as tape:
        params = {name: tape.leaf(arr)
                  for name, arr in model.store.params.items()}
        state = ctrl.initial_state(1, cfg.d_h, cfg.d_v, cfg.dtype)
        mem = model.reset_memory(1)
        if cfg.variant == "MNM-g" and mem is not None:
            mem = mem_mod.MemoryParams(layers=[watch(m) for m in mem.layers],
                                       activations=list(mem.activations))
        if cfg.variant == "LSTM+SALU":
            mem = SlotTable()
        for t in range(n_tokens):
            x = _encode_input(model, params, tokens[t])
            _, state, mem, _, _ = model_step(model, params, state, mem, x,
                                             train=True)
    elapsed = time.perf_counter() - t0
    return elapsed, memory_scalar_count(mem)


def bench_scaling(variants, lengths, repeats: int = 3, seed: int = 0,
                  base: RunConfig | None = None) -> list[dict]:
    """Per-episode wallclock and memory-state size across input lengths."""
    rows = []
    for variant in variants:
        cfg = replace(base if base is not None else RunConfig(),
                      variant=variant, task="double_copy", seed=seed,
                      batch=1)
        model = Model(cfg)
        for length in lengths:
            best = None
            scalars = 0
            for rep in range(repeats):
                rng = np.random.default_rng(seed + rep)
                elapsed, scalars = _bench_episode(model, length, rng)
                best = elapsed if best is None else min(best, elapsed)
            rows.append({"variant": variant, "length": int(length),
                         "seconds": best, "memory_scalars": int(scalars)})
    return rows


def fit_loglog_slope(rows, variant: str) -> float:
    """Least-squares slope of log(time) against log(length)."""
    pts = [(r["length"], r["seconds"]) for r in rows
           if r["variant"] == variant]
    xs = np.log([p[0] for p in pts])
    ys = np.log([p[1] for p in pts])
    return float(np.polyfit(xs, ys, 1)[0])


def bench_write_step(hidden: int = 100, layers: int = 3, repeats: int = 30,
                     seed: int = 0) -> dict:
    """Median wallclock of one gradient write vs one local write."""
    from . import memory as mem_mod
    from .autodiff import Tape, Tensor, watch

    rng = np.random.default_rng(seed)
    d = hidden
    base = mem_mod.init_layers(rng, d, d, hidden, layers)
    fb_arrays = mem_mod.init_feedback(rng, d, [hidden] * (layers - 1) + [d])
    key = rng.uniform(-1, 1, size=(1, d))
    val = rng.uniform(-1, 1, size=(1, d))

    def time_write(kind: str) -> float:
        times = []
        for _ in range(repeats):
            with Tape():
                mem = mem_mod.MemoryParams(
                    layers=[watch(Tensor(m.copy())) for m in base])
                fb = mem_mod.FeedbackParams(
                    weights=[Tensor(fb_arrays[f"fb_w{l}"]) for l in range(layers - 1)],
                    biases=[Tensor(fb_arrays[f"fb_b{l}"]) for l in range(layers - 1)],
                    rate_gates=[Tensor(fb_arrays[f"fb_rate{l}"]) for l in range(layers)],
                )
                keys = [Tensor(key)]
                vals = [Tensor(val)]
                t0 = time.perf_counter()
                if kind == "gradient":
                    mem_mod.write_gradient(mem, keys, vals, 0.5,
                                           track_higher_order=True)
                else:
                    mem_mod.write_local(mem, fb, keys, vals, 0.5)
                times.append(time.perf_counter() - t0)
        return float(np.median(times))

    return {"gradient_write_s": time_write("gradient"),
            "local_write_s": time_write("local")}


def bench_rows_to_csv(rows) -> str:
    lines = ["variant,length,seconds,memory_scalars"]
    for r in rows:
        lines.append(f"{r['variant']},{r['length']},{r['seconds']!r},"
                     f"{r['memory_scalars']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# similarity analysis
# ---------------------------------------------------------------------------

SIMILARITY_PAIRS = {
    "vr_vw": ("read_out", "target_value"),
    "vw_vw": ("target_value", "target_value"),
    "kw_kw": ("write_key", "write_key"),
    "kr_kw": ("read_key", "write_key"),
}


def similarity_trace(trace, pair: tuple[str, str]) -> np.ndarray:
    """Cosine similarity matrix S[t2][t1] between two traced vector series.

    Zero vectors get similarity 0 by definition.
    """
    a = trace.vectors(pair[0])
    b = trace.vectors(pair[1])
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = a @ b.T
    denom = np.outer(na, nb)
    out = np.zeros_like(dots)
    nz = denom > 0
    out[nz] = dots[nz] / denom[nz]
    return out


def matrix_to_csv(mat: np.ndarray) -> str:
    return "\n".join(",".join(repr(float(x)) for x in row) for row in mat) + "\n"
