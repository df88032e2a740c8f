"""Metalearned neural memory: library and experiment harness."""

import os as _os

# The tensors here are tiny; BLAS thread pools only add latency.  Effective
# only when numpy has not been imported yet, and never overrides an
# explicit user setting.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .autodiff import ParamStore, Tape, Tensor, adam_step, backward, clip_grad_norm, grad
from .config import RunConfig, load_config, parse_config_text
from .engine import Model, evaluate, model_step, run_episode, train_update
from .harness import run_experiment

__all__ = [
    "ParamStore", "Tape", "Tensor", "adam_step", "backward",
    "clip_grad_norm", "grad", "RunConfig", "load_config",
    "parse_config_text", "Model", "evaluate", "model_step", "run_episode",
    "train_update", "run_experiment",
]
