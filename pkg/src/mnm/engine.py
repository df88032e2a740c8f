"""Episode engine: one model step, episode rollout, objectives, training.

A step runs controller -> interaction heads -> memory write -> memory read
-> output (write/read order is configurable; write-then-read is the
default, so a key written at step t is readable at step t).  Episodes from
one generator share layout, so a batch runs as one vectorized rollout on a
single tape; the memory weights are episode state with one copy per batch
element.

Training minimizes the mean over the batch of task loss (cross-entropy on
answer positions) plus the storage objective: the post-update recall error
averaged over the episode, optionally extended to delayed recall of older
keys.  For the gradient-write variant the backward pass differentiates
through every write (gradients of gradients); the local-write variant
stays strictly first-order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import baselines, controller, memory, tasks
from .autodiff import (
    ParamStore, Tape, Tensor, adam_step, add, affine, bce_logits,
    clip_grad_norm, gather_cols, gather_rows, global_grad_norm, grad,
    log_softmax, neg, scale, sum_all, suspend_recording, watch,
)
from .config import RunConfig


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class StepRecord:
    """Per-step trace entry (arrays are detached copies)."""
    rate: np.ndarray | None
    loss_before: np.ndarray | None
    loss_after: np.ndarray | None
    read_out: np.ndarray
    read_key: np.ndarray | None = None
    write_key: np.ndarray | None = None
    target_value: np.ndarray | None = None


@dataclass
class EpisodeTrace:
    """Step records plus the tensors the objectives are built from."""
    steps: list[StepRecord] = field(default_factory=list)
    # per step: list indexed by recall delay; entry None when t-delay < 0
    recall_losses: list[list[Tensor | None]] = field(default_factory=list)
    predictions: list[np.ndarray] = field(default_factory=list)
    length: int = 0
    task_loss: float | None = None
    meta_loss: float | None = None

    def vectors(self, name: str) -> np.ndarray:
        """Stack one named per-step vector for batch element 0 -> [T, d]."""
        picks = {
            "read_out": lambda s: s.read_out,
            "read_key": lambda s: s.read_key,
            "write_key": lambda s: s.write_key,
            "target_value": lambda s: s.target_value,
        }
        rows = [picks[name](s) for s in self.steps]
        if any(r is None for r in rows):
            raise ValueError(f"trace was recorded without {name!r} vectors")
        return np.stack([r[0] for r in rows])


def _zero_scalar(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


class Model:
    """A variant plus its trainable parameters and fixed memory base."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        s_params, s_mem, s_train, s_eval = ss.spawn(4)
        self.train_rng = np.random.default_rng(s_train)
        self._eval_seed = s_eval
        rng = np.random.default_rng(s_params)
        dtype = cfg.dtype

        task = cfg.task
        if task == "dictionary":
            self.vocab = tasks.DICT_VOCAB
            self.in_channels = None
            self.n_out = tasks.DICT_VOCAB
        elif task == "double_copy":
            self.vocab = tasks.COPY_VOCAB
            self.in_channels = None
            self.n_out = tasks.COPY_VOCAB
        else:
            self.vocab = None
            self.in_channels = tasks.SORT_CHANNELS
            self.n_out = tasks.SORT_BITS

        store = ParamStore()
        ctrl = controller.init_params(rng, cfg.d_i, cfg.d_h, cfg.d_k,
                                      cfg.d_v, cfg.d_o, cfg.heads, dtype)
        skip = set()
        if cfg.variant == "LSTM":
            skip = {"inter_w", "inter_b", "rate_w", "rate_b"}
        for name, value in ctrl.items():
            if name not in skip:
                store.add(name, value)
        if self.vocab is not None:
            bound = 1.0 / np.sqrt(cfg.d_i)
            store.add("emb", rng.uniform(-bound, bound,
                                         size=(self.vocab, cfg.d_i)).astype(dtype))
        else:
            bound = 1.0 / np.sqrt(self.in_channels)
            store.add("enc_w", rng.uniform(-bound, bound,
                                           size=(self.in_channels, cfg.d_i)).astype(dtype))
            store.add("enc_b", np.zeros((1, cfg.d_i), dtype=dtype))
        bound = 1.0 / np.sqrt(cfg.d_o)
        store.add("head_w", rng.uniform(-bound, bound,
                                        size=(cfg.d_o, self.n_out)).astype(dtype))
        store.add("head_b", np.zeros((1, self.n_out), dtype=dtype))
        if cfg.variant == "MNM-p":
            layer_out_dims = [cfg.hidden] * (cfg.layers - 1) + [cfg.d_v]
            for name, value in memory.init_feedback(
                    rng, cfg.d_v, layer_out_dims, dtype).items():
                store.add(name, value)
        self.store = store

        # fixed random memory base: sampled once, never trained
        if cfg.variant in ("MNM-g", "MNM-p"):
            self.memory_base = memory.init_layers(
                np.random.default_rng(s_mem), cfg.d_k, cfg.d_v,
                cfg.hidden, cfg.layers, dtype)
        else:
            self.memory_base = None

    def reset_memory(self, batch: int) -> memory.MemoryParams | None:
        if self.memory_base is None:
            return None
        return memory.reset(self.memory_base, batch)

    def eval_episode_set(self, count: int) -> list[tasks.TaskEpisode]:
        """Fixed evaluation episodes; identical on every call for a model."""
        rng = np.random.default_rng(self._eval_seed)
        return [self.generate(rng) for _ in range(count)]

    def generate(self, rng: np.random.Generator) -> tasks.TaskEpisode:
        cfg = self.cfg
        if cfg.task == "dictionary":
            return tasks.gen_dictionary_inference(cfg.k, cfg.l, rng)
        if cfg.task == "double_copy":
            return tasks.gen_double_copy(cfg.length, cfg.alphabet, rng)
        return tasks.gen_priority_sort(cfg.n, cfg.m, rng)

    def param_count(self) -> int:
        return self.store.scalar_count()


def _constant_params(model: Model) -> dict[str, Tensor]:
    return {name: Tensor(arr) for name, arr in model.store.params.items()}


def _encode_input(model: Model, params, step_inputs) -> Tensor:
    if model.vocab is not None:
        return gather_rows(params["emb"], step_inputs)
    x = Tensor(np.asarray(step_inputs, dtype=model.cfg.dtype))
    return affine(x, params["enc_w"], params["enc_b"])


def _read_memory(model: Model, mem, iset, batch: int) -> Tensor:
    cfg = model.cfg
    if cfg.variant in ("MNM-g", "MNM-p"):
        readout, _ = memory.read(mem, iset.read_keys)
        return readout
    if cfg.variant == "LSTM+SALU":
        return baselines.salu_read(mem, iset.read_keys, cfg.d_v)
    return Tensor(np.zeros((batch, cfg.d_v), dtype=cfg.dtype))


def model_step(model: Model, params, state: controller.ControllerState,
               mem, x: Tensor, train: bool = False):
    """One step: recur, emit interactions, write, read, output.

    Returns (output vector, new controller state, new memory state,
    interaction set or None, write outcome or None).
    """
    cfg = model.cfg
    batch = x.shape[0]
    stepped = controller.lstm_step(params, state, x)
    iset = None
    outcome = None
    v_read = None
    if cfg.variant == "LSTM":
        v_read = Tensor(np.zeros((batch, cfg.d_v), dtype=cfg.dtype))
    else:
        iset = controller.emit_interactions(params, stepped.h, cfg.d_k,
                                            cfg.d_v, cfg.heads)
        if cfg.order == "read_then_write":
            v_read = _read_memory(model, mem, iset, batch)
        if cfg.variant == "MNM-g":
            outcome = memory.write_gradient(
                mem, iset.write_keys, iset.target_values, iset.rate,
                track_higher_order=train, n_steps=cfg.inner_steps)
            mem = outcome.params
        elif cfg.variant == "MNM-p":
            fb = memory.feedback_from(params, cfg.layers)
            outcome = memory.write_local(
                mem, fb, iset.write_keys, iset.target_values, iset.rate)
            mem = outcome.params
        else:
            mem = baselines.salu_write(mem, iset.write_keys,
                                       iset.target_values)
        if cfg.order == "write_then_read":
            v_read = _read_memory(model, mem, iset, batch)
    y = controller.output_head(params, stepped.h, v_read)
    new_state = controller.ControllerState(h=stepped.h, c=stepped.c,
                                           v_read_prev=v_read)
    return y, new_state, mem, iset, outcome


def _stack_episodes(episodes: Sequence[tasks.TaskEpisode]):
    first = episodes[0]
    for ep in episodes[1:]:
        if (ep.kind != first.kind or ep.length != first.length
                or not np.array_equal(ep.target_mask, first.target_mask)):
            raise ValueError("batch episodes must share task layout")
    inputs = np.stack([ep.inputs for ep in episodes], axis=1)
    targets = np.stack([ep.targets for ep in episodes], axis=1)
    return inputs, targets, first.target_mask


def run_episode(model: Model, episodes, params=None, train: bool = False,
                record_vectors: bool = False):
    """Roll the model over a batch of identically-shaped episodes.

    Returns (trace, task_loss, meta_loss); the losses are scalar tensors,
    means over answer positions/steps and over the batch.  When ``train``,
    the caller must provide tape-leaf parameters and run inside the tape.
    """
    cfg = model.cfg
    if isinstance(episodes, tasks.TaskEpisode):
        episodes = [episodes]
    inputs, targets, mask = _stack_episodes(episodes)
    batch = len(episodes)
    horizon = len(mask)
    if params is None:
        params = _constant_params(model)

    state = controller.initial_state(batch, cfg.d_h, cfg.d_v, cfg.dtype)
    mem = None
    if cfg.variant in ("MNM-g", "MNM-p"):
        mem = model.reset_memory(batch)
        if train and cfg.variant == "MNM-g":
            # write-time gradients need the initial weights as tape nodes
            mem = memory.MemoryParams(
                layers=[watch(m) for m in mem.layers],
                activations=list(mem.activations))
    elif cfg.variant == "LSTM+SALU":
        mem = baselines.SlotTable()

    trace = EpisodeTrace(length=horizon)
    weights = cfg.recall_weights()
    window: list[tuple[list[Tensor], list[Tensor]]] = []  # recent write keys/values
    loss_acc: Tensor | None = None
    n_answers = 0
    answer_ptr = 0

    for t in range(horizon):
        x = _encode_input(model, params, inputs[t])
        y, state, mem, iset, outcome = model_step(model, params, state, mem,
                                                  x, train=train)

        # objectives on answer positions
        if mask[t]:
            logits = affine(y, params["head_w"], params["head_b"])
            if model.vocab is not None:
                picked = gather_cols(log_softmax(logits), targets[answer_ptr])
                term = neg(sum_all(picked))
            else:
                bits = Tensor(np.asarray(targets[answer_ptr], dtype=cfg.dtype))
                term = scale(sum_all(bce_logits(logits, bits)),
                             1.0 / tasks.SORT_BITS)
            loss_acc = term if loss_acc is None else add(loss_acc, term)
            n_answers += 1
            trace.predictions.append(logits.data)
            answer_ptr += 1

        # delayed-recall terms against the step's post-write memory
        recalls: list[Tensor | None] = [None] * (cfg.recall_delay + 1)
        if outcome is not None:
            recalls[0] = outcome.loss_after
            window.append((list(iset.write_keys), list(iset.target_values)))
            for tau in range(1, cfg.recall_delay + 1):
                if len(window) > tau:
                    keys, vals = window[-1 - tau]
                    recalls[tau] = memory.memory_loss(mem, keys, vals)
            if len(window) > cfg.recall_delay + 1:
                window.pop(0)
        trace.recall_losses.append(recalls)

        trace.steps.append(StepRecord(
            rate=None if iset is None else iset.rate.data.copy(),
            loss_before=None if outcome is None else outcome.loss_before.data.copy(),
            loss_after=None if outcome is None else outcome.loss_after.data.copy(),
            read_out=state.v_read_prev.data.copy(),
            read_key=iset.read_keys[0].data.copy() if record_vectors and iset else None,
            write_key=iset.write_keys[0].data.copy() if record_vectors and iset else None,
            target_value=iset.target_values[0].data.copy() if record_vectors and iset else None,
        ))

    if loss_acc is None:
        task_loss = _zero_scalar(cfg.dtype)
    else:
        task_loss = scale(loss_acc, 1.0 / (n_answers * batch))
    meta = meta_loss(trace, weights, batch)
    trace.task_loss = float(task_loss.data)
    trace.meta_loss = float(meta.data)
    return trace, task_loss, meta


def meta_loss(trace: EpisodeTrace, recall_weights: Sequence[float],
              batch: int) -> Tensor:
    """Episode-mean post-update recall error, batch-averaged to a scalar.

    With the maximum recall delay at 0 this is exactly the mean of the
    per-step post-write losses; delayed terms weigh older key/value pairs
    by their decay weight and share the same 1/T normalization.
    """
    total: Tensor | None = None
    for recalls in trace.recall_losses:
        for tau, term in enumerate(recalls):
            if term is None:
                continue
            weighted = term if recall_weights[tau] == 1.0 else scale(
                term, recall_weights[tau])
            total = weighted if total is None else add(total, weighted)
    if total is None:
        return _zero_scalar(np.float64)
    per_elem = scale(total, 1.0 / trace.length)
    return scale(sum_all(per_elem), 1.0 / batch)


def _train_chunk(model: Model, episodes):
    cfg = model.cfg
    names = model.store.names()
    tape = Tape()
    with tape:
        leaves = {name: tape.leaf(arr)
                  for name, arr in model.store.params.items()}
        trace, task_loss, meta = run_episode(model, episodes, params=leaves,
                                             train=True)
        total = add(task_loss, scale(meta, cfg.meta_weight))
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingDiverged(
                "non-finite training loss",
                {"task_loss": float(task_loss.data),
                 "meta_loss": float(meta.data)})
        grads = grad(total, [leaves[name] for name in names])
    return (float(task_loss.data), float(meta.data),
            {name: g.data for name, g in zip(names, grads)},
            len(tape), tape.higher_order_nodes)


def train_update(model: Model, episodes: Sequence[tasks.TaskEpisode]) -> dict:
    """One optimization step on a batch of episodes.

    The batch may be split across worker threads (each slice on its own
    tape); slice gradients are combined in slice order, so the result does
    not depend on scheduling.  Returns step statistics.
    """
    cfg = model.cfg
    episodes = list(episodes)
    batch = len(episodes)
    if batch < 1:
        raise ValueError("batch must contain at least one episode")
    jobs = max(1, min(cfg.jobs, batch))
    if jobs == 1:
        results = [_train_chunk(model, episodes)]
        chunk_sizes = [batch]
    else:
        bounds = np.linspace(0, batch, jobs + 1).astype(int)
        chunks = [episodes[bounds[i]:bounds[i + 1]] for i in range(jobs)]
        chunks = [c for c in chunks if c]
        chunk_sizes = [len(c) for c in chunks]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(lambda c: _train_chunk(model, c), chunks))

    names = model.store.names()
    task_total = 0.0
    meta_total = 0.0
    grads = {name: None for name in names}
    nodes = 0
    higher = 0
    for (task_v, meta_v, chunk_grads, n_nodes, n_higher), size in zip(
            results, chunk_sizes):
        w = size / batch
        task_total += task_v * w
        meta_total += meta_v * w
        nodes += n_nodes
        higher += n_higher
        for name in names:
            g = chunk_grads[name] * w
            grads[name] = g if grads[name] is None else grads[name] + g

    grad_norm = global_grad_norm(grads)
    grads = clip_grad_norm(grads, cfg.clip)
    adam_step(model.store, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return {
        "task_loss": task_total,
        "meta_loss": meta_total,
        "grad_norm": grad_norm,
        "tape_nodes": nodes,
        "higher_order_nodes": higher,
    }


def evaluate(model: Model, episodes: Sequence[tasks.TaskEpisode]) -> dict:
    """Greedy decoding metrics on a fixed episode list; mutates nothing."""
    episodes = list(episodes)
    _, targets, mask = _stack_episodes(episodes)
    batch = len(episodes)
    with suspend_recording():
        trace, task_loss, meta = run_episode(model, episodes, train=False)

    preds = trace.predictions
    correct = None
    for row, pred in enumerate(preds):
        if model.vocab is not None:
            ok = pred.argmax(axis=1) == targets[row]
        else:
            bits = (1.0 / (1.0 + np.exp(-pred))) > 0.5
            ok = np.all(bits == (targets[row] > 0.5), axis=1)
        ok = ok.reshape(1, batch)
        correct = ok if correct is None else np.concatenate([correct, ok])
    if correct is None:
        token_acc = 1.0
        seq_acc = 1.0
    else:
        token_acc = float(correct.mean())
        seq_acc = float(correct.all(axis=0).mean())
    return {
        "task_loss": float(task_loss.data),
        "meta_loss": float(meta.data),
        "token_acc": token_acc,
        "seq_acc": seq_acc,
    }


def memory_scalar_count(mem) -> int:
    """Scalars of memory state held for one episode element."""
    if mem is None:
        return 0
    return mem.scalar_count()
