"""Soft-attention look-up table: the unbounded tabular memory baseline.

The table appends every (key, value) pair it is given and never overwrites;
reads take a softmax over dot-product scores against all stored keys, so
per-read cost grows with the table and per-episode cost is quadratic in the
episode length.  Entries are batched ``[B, d]`` rows, one list entry per
stored slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor, add, bcast_cols, concat, exp, log_softmax, mul, scale, slice_axis,
    sum_cols,
)


@dataclass
class SlotTable:
    """Growing key/value slots; grows by H entries per written step."""
    keys: list[Tensor] = field(default_factory=list)
    values: list[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.keys)

    def scalar_count(self) -> int:
        """Stored scalars per episode element (grows linearly with writes)."""
        per_slot = 0
        if self.keys:
            per_slot = self.keys[0].shape[1] + self.values[0].shape[1]
        return len(self.keys) * per_slot


def salu_write(table: SlotTable, write_keys: Sequence[Tensor],
               targets: Sequence[Tensor]) -> SlotTable:
    """Append all head pairs; existing slots are never modified."""
    if len(write_keys) != len(targets):
        raise ValueError("need one value per key")
    return SlotTable(keys=list(table.keys) + list(write_keys),
                     values=list(table.values) + list(targets))


def salu_read(table: SlotTable, read_keys: Sequence[Tensor],
              value_dim: int) -> Tensor:
    """Softmax-attention read, averaged over heads; empty table reads zero."""
    batch = read_keys[0].shape[0]
    dtype = read_keys[0].dtype
    if not table.keys:
        return Tensor(np.zeros((batch, value_dim), dtype=dtype))
    out = None
    for key in read_keys:
        scores = concat([sum_cols(mul(key, k)) for k in table.keys], axis=1)
        weights = exp(log_softmax(scores))
        head = None
        for j, value in enumerate(table.values):
            w = bcast_cols(slice_axis(weights, 1, j, j + 1), value_dim)
            term = mul(w, value)
            head = term if head is None else add(head, term)
        out = head if out is None else add(out, head)
    if len(read_keys) > 1:
        out = scale(out, 1.0 / len(read_keys))
    return out
