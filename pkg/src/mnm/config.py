"""Run configuration: one flat record, parsed from line-oriented key=value.

Unknown keys are rejected.  Defaults follow the algorithmic-task setup:
single-layer controller with 100 hidden units, a 3-layer memory with
100-unit hidden layers, one interaction head, batch 32, Adam at 1e-3.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

VARIANTS = ("MNM-g", "MNM-p", "LSTM", "LSTM+SALU")
TASKS = ("dictionary", "double_copy", "priority_sort")
ORDERS = ("write_then_read", "read_then_write")
PRECISIONS = ("f64", "f32")


@dataclass
class RunConfig:
    variant: str = "MNM-p"
    task: str = "dictionary"
    # task parameters
    k: int = 4            # dictionary support pairs
    l: int = 1            # dictionary sequence length
    length: int = 50      # double-copy sequence length
    alphabet: int = 10    # double-copy symbol count
    n: int = 20           # sort items presented
    m: int = 16           # sort items answered
    # model dims
    d_i: int = 100
    d_h: int = 100
    d_o: int = 100
    d_k: int = 100
    d_v: int = 100
    hidden: int = 100     # memory hidden width
    layers: int = 3       # memory depth
    heads: int = 1
    # optimizer
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 10.0
    # training
    batch: int = 32
    iterations: int = 20000
    eval_interval: int = 200
    eval_episodes: int = 128
    seed: int = 0
    precision: str = "f64"
    order: str = "write_then_read"
    meta_weight: float = 1.0
    recall_delay: int = 0          # max recall delay in the meta objective
    recall_decay: float = 1.0      # geometric decay for delayed terms
    inner_steps: int = 1           # gradient-write steps per model step
    jobs: int = 1
    stop_seq_acc: float = -1.0     # >= 0 stops at this eval sequence accuracy
    stop_token_acc: float = -1.0   # >= 0 stops at this eval token accuracy
    out_dir: str = "runs/default"
    resume: str = ""               # checkpoint path to continue from

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")
        for name in ("k", "l", "length", "alphabet", "n", "m", "d_i", "d_h",
                     "d_o", "d_k", "d_v", "hidden", "layers", "heads",
                     "batch", "eval_episodes", "inner_steps", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.m > self.n:
            raise ValueError("m must not exceed n")
        if self.iterations < 0 or self.eval_interval < 1:
            raise ValueError("bad iteration counts")
        if self.recall_delay < 0:
            raise ValueError("recall_delay must be >= 0")
        return self

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def recall_weights(self) -> list[float]:
        """Decay weight per recall delay; delay 0 always weighs 1."""
        return [self.recall_decay ** t for t in range(self.recall_delay + 1)]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELDS[name].type
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse key=value lines ('#' comments allowed); unknown keys rejected."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, value))
    return cfg.validate()


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
