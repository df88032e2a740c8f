"""LSTM controller: recurrent core, interaction heads, and output head.

All functions are pure maps over an explicit parameter mapping and state;
activations are batched row-major ``[B, features]``.  Weight matrices are
stored ``[in, out]`` and biases as ``[1, out]`` rows.  Each step the
controller emits, from its hidden state, H read keys, H write keys, H
target values and a write-rate scalar squashed into (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import (
    Tensor, affine, concat, add, mul, sigmoid, slice_axis, tanh,
)


@dataclass
class ControllerState:
    """Recurrent carry: LSTM hidden/cell plus the previous memory read-out."""
    h: Tensor
    c: Tensor
    v_read_prev: Tensor


@dataclass
class InteractionSet:
    """Per-step memory interaction vectors emitted by the controller."""
    read_keys: list[Tensor]      # H x [B, d_k]
    write_keys: list[Tensor]     # H x [B, d_k]
    target_values: list[Tensor]  # H x [B, d_v]
    rate_raw: Tensor             # [B, d_k]
    rate: Tensor                 # [B, 1], in (0, 1)


def init_params(rng: np.random.Generator, d_i: int, d_h: int, d_k: int,
                d_v: int, d_o: int, heads: int,
                dtype=np.float64) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights; LSTM forget-gate bias starts at 1."""
    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    lstm_in = d_i + d_v + d_h
    inter_out = 2 * heads * d_k + heads * d_v + d_k
    params = {
        "lstm_w": uniform(lstm_in, (lstm_in, 4 * d_h)),
        "lstm_b": np.zeros((1, 4 * d_h), dtype=dtype),
        "inter_w": uniform(d_h, (d_h, inter_out)),
        "inter_b": np.zeros((1, inter_out), dtype=dtype),
        "rate_w": uniform(d_k, (d_k, 1)),
        "rate_b": np.zeros((1, 1), dtype=dtype),
        "out_w": uniform(d_h + d_v, (d_h + d_v, d_o)),
        "out_b": np.zeros((1, d_o), dtype=dtype),
    }
    params["lstm_b"][0, d_h:2 * d_h] = 1.0
    return params


def initial_state(batch: int, d_h: int, d_v: int, dtype=np.float64) -> ControllerState:
    return ControllerState(
        h=Tensor(np.zeros((batch, d_h), dtype=dtype)),
        c=Tensor(np.zeros((batch, d_h), dtype=dtype)),
        v_read_prev=Tensor(np.zeros((batch, d_v), dtype=dtype)),
    )


def lstm_step(params: Mapping[str, Tensor], state: ControllerState,
              x: Tensor) -> ControllerState:
    """One LSTM cell step on concat(x, previous read-out).

    Gate layout along the output axis is [input, forget, candidate, output].
    The previous read-out is carried unchanged; the episode engine replaces
    it after the step's memory read.
    """
    batch, d_h = state.h.shape
    inp = concat([x, state.v_read_prev, state.h], axis=1)
    gates = affine(inp, params["lstm_w"], params["lstm_b"])
    i = sigmoid(slice_axis(gates, 1, 0, d_h))
    f = sigmoid(slice_axis(gates, 1, d_h, 2 * d_h))
    g = tanh(slice_axis(gates, 1, 2 * d_h, 3 * d_h))
    o = sigmoid(slice_axis(gates, 1, 3 * d_h, 4 * d_h))
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return ControllerState(h=h, c=c, v_read_prev=state.v_read_prev)


def emit_interactions(params: Mapping[str, Tensor], h: Tensor, d_k: int,
                      d_v: int, heads: int) -> InteractionSet:
    """Single tanh affine map sliced into keys, values and the raw rate.

    Slice order along the feature axis: all read keys, then all write keys,
    then all target values, then the raw rate vector.  The rate is projected
    to a scalar and squashed by a sigmoid.
    """
    batch = h.shape[0]
    raw = tanh(affine(h, params["inter_w"], params["inter_b"]))
    pos = 0
    def take(width):
        nonlocal pos
        out = slice_axis(raw, 1, pos, pos + width)
        pos += width
        return out
    read_keys = [take(d_k) for _ in range(heads)]
    write_keys = [take(d_k) for _ in range(heads)]
    target_values = [take(d_v) for _ in range(heads)]
    rate_raw = take(d_k)
    rate = sigmoid(affine(rate_raw, params["rate_w"], params["rate_b"]))
    return InteractionSet(read_keys, write_keys, target_values, rate_raw, rate)


def output_head(params: Mapping[str, Tensor], h: Tensor,
                v_read: Tensor) -> Tensor:
    """Linear output on concat(hidden, read-out); no nonlinearity here."""
    return affine(concat([h, v_read], axis=1), params["out_w"],
                  params["out_b"])
