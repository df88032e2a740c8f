"""Feed-forward neural memory: forward reads and one-shot parameter writes.

The memory is a stack of bias-free layers ``z_l = act(M_l @ z_{l-1})``
whose weights are episode-local state: reading is a forward pass on a key,
writing is a single parameter update that binds write keys to target
values.  Two write rules are provided:

* a modulated gradient step on the key/value regression error, optionally
  recorded for end-to-end training (which then needs gradients of
  gradients), and
* a local perceptron-style update per layer against activations predicted
  from the target value by a learned feedback network, applied without any
  graph tracking.

Everything is batched: layer weights are ``[B, out, in]`` and keys/values
``[B, d]``, so independent episodes update independent weight copies.  A
sparse-distributed-memory reference (hard threshold addressing, additive
content updates) is included as an oracle for the write rules' algebra.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import (
    Tape, Tensor, add, affine, assert_finite, bcast_mat, bcast_rows, bmm,
    btranspose, ge_const, grad, mul, recording, reshape, scale, sigmoid, sub,
    sum_all, sum_cols, suspend_recording, tanh, _tls,
)

Activation = str | tuple[str, float]


@dataclass
class MemoryParams:
    """Per-episode memory weights: L batched matrices plus activation kinds.

    ``layers[l]`` has shape [B, out_l, in_l]; activations are "tanh",
    "identity", or ("binary", delta) for hard threshold addressing.
    """
    layers: list[Tensor]
    activations: list[Activation] = field(default=None)

    def __post_init__(self):
        if self.activations is None:
            self.activations = ["tanh"] * len(self.layers)
        if len(self.activations) != len(self.layers):
            raise ValueError("one activation per layer required")

    @property
    def batch(self) -> int:
        return self.layers[0].shape[0]

    @property
    def key_dim(self) -> int:
        return self.layers[0].shape[2]

    @property
    def value_dim(self) -> int:
        return self.layers[-1].shape[1]

    def scalar_count(self) -> int:
        """Stored scalars per episode (independent of episode length)."""
        return sum(m.data[0].size for m in self.layers)


@dataclass
class FeedbackParams:
    """Learned per-layer activation predictors for the local write rule.

    Hidden layer l gets a one-layer MLP value -> activation; the output
    layer's prediction is the target value itself.  Each layer also carries
    a learned rate gate (a raw scalar passed through a sigmoid).
    """
    weights: list[Tensor]    # (L-1) x [d_v, D_l]
    biases: list[Tensor]     # (L-1) x [1, D_l]
    rate_gates: list[Tensor]  # L x [1, 1]


@dataclass
class WriteOutcome:
    """Result of one write: pre/post regression losses and new weights.

    Losses are per-episode ``[B, 1]`` tensors; ``loss_after`` is evaluated
    by a fresh forward pass through the updated weights.
    """
    loss_before: Tensor
    loss_after: Tensor
    params: MemoryParams


MEMORY_INIT_GAIN = 1.5  # keeps tanh activations away from both 0 and saturation


def init_layers(rng: np.random.Generator, d_k: int, d_v: int, hidden: int,
                n_layers: int, dtype=np.float64) -> list[np.ndarray]:
    """One fixed random layer stack [out, in]; uniform(+-gain/sqrt(fan_in))."""
    dims = [d_k] + [hidden] * (n_layers - 1) + [d_v]
    out = []
    for l in range(n_layers):
        bound = MEMORY_INIT_GAIN / np.sqrt(dims[l])
        out.append(rng.uniform(-bound, bound,
                               size=(dims[l + 1], dims[l])).astype(dtype))
    return out


def reset(base: Sequence[np.ndarray], batch: int,
          activations: Sequence[Activation] | None = None) -> MemoryParams:
    """Fresh episode memory from the fixed random base weights.

    Every call returns the same values (the base is sampled once per model
    and never trained); the per-episode copies are broadcast views and are
    never mutated in place.
    """
    layers = [Tensor(np.broadcast_to(m, (batch,) + m.shape)) for m in base]
    acts = list(activations) if activations is not None else None
    return MemoryParams(layers=layers, activations=acts)


def init_feedback(rng: np.random.Generator, d_v: int,
                  layer_out_dims: Sequence[int],
                  dtype=np.float64) -> dict[str, np.ndarray]:
    """Named arrays for FeedbackParams covering a given layer stack."""
    params: dict[str, np.ndarray] = {}
    hidden_dims = layer_out_dims[:-1]
    for l, dim in enumerate(hidden_dims):
        bound = 1.0 / np.sqrt(d_v)
        params[f"fb_w{l}"] = rng.uniform(-bound, bound, size=(d_v, dim)).astype(dtype)
        params[f"fb_b{l}"] = np.zeros((1, dim), dtype=dtype)
    for l in range(len(layer_out_dims)):
        params[f"fb_rate{l}"] = np.zeros((1, 1), dtype=dtype)
    return params


def feedback_from(params: Mapping[str, Tensor], n_layers: int) -> FeedbackParams:
    return FeedbackParams(
        weights=[params[f"fb_w{l}"] for l in range(n_layers - 1)],
        biases=[params[f"fb_b{l}"] for l in range(n_layers - 1)],
        rate_gates=[params[f"fb_rate{l}"] for l in range(n_layers)],
    )


def _activate(x: Tensor, kind: Activation, in_dim: int) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "identity":
        return x
    if isinstance(kind, tuple) and kind[0] == "binary":
        # fires when (in_dim - x)/2 <= delta, i.e. x >= in_dim - 2*delta
        return ge_const(x, in_dim - 2.0 * kind[1])
    raise ValueError(f"unknown memory activation: {kind!r}")


def forward(params: MemoryParams, key: Tensor,
            keep_activations: bool = False):
    """Push one key [B, d_k] through all layers -> value [B, d_v].

    With ``keep_activations`` also returns the per-layer post-activation
    columns [B, D_l, 1] including the input key at index 0.
    """
    b, d_k = key.shape
    z = reshape(key, (b, d_k, 1))
    zs = [z] if keep_activations else None
    for m, act in zip(params.layers, params.activations):
        z = _activate(bmm(m, z), act, m.shape[2])
        if keep_activations:
            zs.append(z)
    out = reshape(z, (b, z.shape[1]))
    return (out, zs) if keep_activations else out


def read(params: MemoryParams, keys: Sequence[Tensor]):
    """Mean of the per-head forward values; also returns head activations."""
    outs, acts = [], []
    for k in keys:
        v, zs = forward(params, k, keep_activations=True)
        outs.append(v)
        acts.append(zs)
    readout = outs[0]
    for v in outs[1:]:
        readout = add(readout, v)
    if len(outs) > 1:
        readout = scale(readout, 1.0 / len(outs))
    return readout, acts


def _head_error(pred: Tensor, target: Tensor) -> Tensor:
    # mean squared error over value components, [B, 1] per episode element
    d = sub(pred, target)
    return scale(sum_cols(mul(d, d)), 1.0 / pred.shape[1])


def memory_loss(params: MemoryParams, write_keys: Sequence[Tensor],
                targets: Sequence[Tensor]) -> Tensor:
    """Head-averaged mean squared recall error, per episode element [B, 1].

    The error for one head is the squared residual averaged over value
    components, which is the normalization whose gradient w.r.t. the last
    layer carries the 2/d_v factor the hard-location equivalence relies on.
    """
    if len(write_keys) != len(targets) or not write_keys:
        raise ValueError("need one target per write key")
    total = None
    for k, v in zip(write_keys, targets):
        term = _head_error(forward(params, k), v)
        total = term if total is None else add(total, term)
    if len(write_keys) > 1:
        total = scale(total, 1.0 / len(write_keys))
    return total


def _loss_from_preds(preds: list[Tensor], targets: Sequence[Tensor]) -> Tensor:
    total = None
    for p, v in zip(preds, targets):
        term = _head_error(p, v)
        total = term if total is None else add(total, term)
    if len(preds) > 1:
        total = scale(total, 1.0 / len(preds))
    return total


def _as_rate(rate, batch: int, dtype) -> Tensor:
    if isinstance(rate, Tensor):
        return rate
    arr = np.full((batch, 1), float(rate), dtype=dtype)
    return Tensor(arr)


def write_gradient(params: MemoryParams, write_keys: Sequence[Tensor],
                   targets: Sequence[Tensor], rate,
                   track_higher_order: bool = False,
                   n_steps: int = 1) -> WriteOutcome:
    """Bind keys to values by modulated gradient step(s) on the recall error.

    The gradient is taken w.r.t. the layer weights with keys and targets
    held fixed as data.  When ``track_higher_order`` the step is recorded on
    the active tape, so a later backward pass differentiates through the
    update (into the rate, the keys and the targets).  Otherwise the
    gradient is computed on a throwaway tape and the update stays detached.
    """
    batch = params.batch
    dtype = params.layers[0].dtype
    rate_t = _as_rate(rate, batch, dtype)
    cur = params
    loss_before = None
    checked = _tls().checked
    for step in range(n_steps):
        # The rate weighs the backward seed: elements are independent, so
        # grad(sum_b rate_b * L_b) w.r.t. layer b is rate_b * grad(L_b),
        # and the recorded expression keeps the rate differentiable.
        if track_higher_order:
            preds = [forward(cur, k) for k in write_keys]
            per_elem = _loss_from_preds(preds, targets)
            root = sum_all(mul(per_elem, rate_t))
            # keys, targets and the rate are data for this inner step: stop
            # them so the feedback path (previous read-out -> controller ->
            # this step's interactions) does not leak into the weight grads
            grads = grad(root, cur.layers, create_graph=True,
                         stop=list(write_keys) + list(targets) + [rate_t])
            new_layers = [sub(m, g) for m, g in zip(cur.layers, grads)]
        else:
            with Tape() as t, recording(True):
                leaves = [t.leaf(m) for m in cur.layers]
                local = MemoryParams(layers=leaves,
                                     activations=list(cur.activations))
                preds = [forward(local, Tensor(k.data)) for k in write_keys]
                per_elem = _loss_from_preds(
                    preds, [Tensor(v.data) for v in targets])
                root = sum_all(mul(per_elem, Tensor(rate_t.data)))
                grads = grad(root, leaves)
            with suspend_recording():
                new_layers = [sub(m, g.detach())
                              for m, g in zip(cur.layers, grads)]
                per_elem = per_elem.detach()
        if checked:
            for g in grads:
                assert_finite(g.data, "write gradient")
        if loss_before is None:
            loss_before = per_elem
        cur = MemoryParams(layers=new_layers,
                           activations=list(cur.activations))
    loss_after = memory_loss(cur, write_keys, targets)
    return WriteOutcome(loss_before=loss_before, loss_after=loss_after,
                        params=cur)


def predict_feedback(fb: FeedbackParams, target_value: Tensor,
                     n_layers: int) -> list[Tensor]:
    """Per-layer predicted activations for a target value.

    Hidden layers use their learned one-layer MLP; the output layer's
    prediction is the target value itself.
    """
    preds = []
    for w, b in zip(fb.weights, fb.biases):
        preds.append(tanh(affine(target_value, w, b)))
    preds.append(target_value)
    if len(preds) != n_layers:
        raise ValueError("feedback params do not cover the layer stack")
    return preds


def write_local(params: MemoryParams, fb: FeedbackParams,
                write_keys: Sequence[Tensor], targets: Sequence[Tensor],
                rate, layer_order: Sequence[int] | None = None) -> WriteOutcome:
    """Perceptron-style local update of every layer from one forward pass.

    For each layer, the update is ``M -= rate_l * (z - z') z_prev^T`` with
    ``z`` the forward activation (old weights), ``z'`` the predicted
    activation, and ``rate_l = rate * sigmoid(gate_l)``.  All layers use
    pre-update activations, so updates commute and need no graph tracking
    of the update itself; with several heads the outer products are
    averaged.  ``layer_order`` only permutes the application order.
    """
    batch = params.batch
    dtype = params.layers[0].dtype
    rate_t = _as_rate(rate, batch, dtype)
    n_layers = len(params.layers)
    checked = _tls().checked

    head_zs = []
    preds = []
    for k in write_keys:
        out, zs = forward(params, k, keep_activations=True)
        head_zs.append(zs)
        preds.append(out)
    loss_before = _loss_from_preds(preds, targets)

    # per-layer rates, head averaging folded in so the [B,out,in] outer
    # products are summed without further scaling
    rates = []
    for l in range(n_layers):
        gate = sigmoid(fb.rate_gates[l])
        rate_l = mul(rate_t, bcast_rows(gate, batch))
        if len(targets) > 1:
            rate_l = scale(rate_l, 1.0 / len(targets))
        rates.append(rate_l)

    deltas: list[Tensor | None] = [None] * n_layers
    for v in range(len(targets)):
        predicted = predict_feedback(fb, targets[v], n_layers)
        zs = head_zs[v]
        for l in range(n_layers):
            z_col = zs[l + 1]
            err = sub(z_col, reshape(predicted[l], z_col.shape))
            # scale the error column (cheap) rather than the outer product
            err = mul(bcast_mat(rates[l], (z_col.shape[1], 1)), err)
            outer = bmm(err, btranspose(zs[l]))
            deltas[l] = outer if deltas[l] is None else add(deltas[l], outer)

    new_layers: list[Tensor] = list(params.layers)
    order = list(layer_order) if layer_order is not None else range(n_layers)
    for l in order:
        if checked:
            assert_finite(deltas[l].data, "local write update")
        new_layers[l] = sub(params.layers[l], deltas[l])

    new = MemoryParams(layers=new_layers, activations=list(params.activations))
    loss_after = memory_loss(new, write_keys, targets)
    return WriteOutcome(loss_before=loss_before, loss_after=loss_after,
                        params=new)


# ---------------------------------------------------------------------------
# sparse distributed memory reference (oracle for the write-rule algebra)
# ---------------------------------------------------------------------------

@dataclass
class SdmState:
    """Hard-location memory: fixed +-1 address rows, additive content."""
    address: np.ndarray   # [n_locations, d_k], entries in {-1, +1}
    content: np.ndarray   # [d_v, n_locations]
    threshold: float

    def __post_init__(self):
        if not np.all(np.isin(self.address, (-1, 1))):
            raise ValueError("address matrix entries must be +-1")
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")
        self.address = self.address.copy()
        self.address.setflags(write=False)


def sdm_activation(sdm: SdmState, key: np.ndarray) -> np.ndarray:
    """0/1 location vector: fires where (d_k - A.k)/2 <= threshold."""
    m = sdm.address @ key
    return ((sdm.address.shape[1] - m) / 2.0 <= sdm.threshold).astype(float)


def sdm_read(sdm: SdmState, key: np.ndarray) -> np.ndarray:
    return sdm.content @ sdm_activation(sdm, key)


def sdm_reference_update(sdm: SdmState, key: np.ndarray,
                         value: np.ndarray) -> SdmState:
    """Additive write: content += value x activation^T."""
    a = sdm_activation(sdm, key)
    return SdmState(address=sdm.address,
                    content=sdm.content + np.outer(value, a),
                    threshold=sdm.threshold)
