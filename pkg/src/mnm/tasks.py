"""Synthetic episode generators: dictionary inference, double copy, sort.

Episodes are fixed-length given the task parameters, so batches of episodes
from one generator always align position-for-position.  Token tasks carry
integer ids; the sort task carries float channel vectors.  Targets live on
placeholder positions marked by the target mask.

Dictionary inference vocabulary: letters a..z are ids 0..25, followed by
four specials: EOS (end of any sequence, also the in-pair separator),
PAIR_SEP (end of one support example), END_SUPPORT (end of the support
set), and PLACEHOLDER.  Source letters are a..m, target letters n..z; the
source-to-target bijection is redrawn for every episode so the mapping can
only be recovered from the episode's own support pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_LETTERS = 26
N_SOURCE = 13
EOS = 26
PAIR_SEP = 27
END_SUPPORT = 28
PLACEHOLDER = 29
DICT_VOCAB = 30

COPY_EOS = 10
COPY_PLACEHOLDER = 11
COPY_VOCAB = 12

SORT_BITS = 8
SORT_CHANNELS = SORT_BITS + 2  # bits, priority, answer-phase marker


@dataclass
class TaskEpisode:
    """One episode: inputs, targets aligned to mask-true positions, mask."""
    kind: str
    inputs: np.ndarray        # [T] int ids, or [T, C] float channels
    targets: np.ndarray       # [n_targets] int ids, or [n_targets, bits]
    target_mask: np.ndarray   # [T] bool
    vocab_size: int | None = None

    def __post_init__(self):
        if int(self.target_mask.sum()) != len(self.targets):
            raise ValueError("mask true count must equal target count")
        if self.vocab_size is not None and self.inputs.max() >= self.vocab_size:
            raise ValueError("token id outside vocabulary")

    @property
    def length(self) -> int:
        return len(self.inputs)


def translate(mapping: dict[int, int] | np.ndarray, seq: np.ndarray) -> np.ndarray:
    """Apply a letter mapping to a source-id sequence."""
    if isinstance(mapping, dict):
        return np.array([mapping[int(s)] for s in seq], dtype=np.int64)
    return np.asarray(mapping)[np.asarray(seq)]


def gen_dictionary_inference(k: int, l: int, rng: np.random.Generator) -> TaskEpisode:
    """Few-shot letter translation episode.

    Layout: k support blocks of [src(l) EOS tgt(l) PAIR_SEP], then
    END_SUPPORT, the query source sequence (all its letters drawn from the
    support sources), EOS, and l PLACEHOLDER positions whose targets are the
    mapped query.  Total length is k(2l+2) + 2l + 2.
    """
    if k < 1 or l < 1:
        raise ValueError("support size and sequence length must be >= 1")
    # fresh bijection source letter -> target letter id for this episode
    mapping = N_SOURCE + rng.permutation(N_SOURCE)
    support = [rng.integers(0, N_SOURCE, size=l) for _ in range(k)]
    seen = np.unique(np.concatenate(support))
    query = seen[rng.integers(0, len(seen), size=l)]

    tokens: list[int] = []
    for src in support:
        tokens.extend(int(s) for s in src)
        tokens.append(EOS)
        tokens.extend(int(t) for t in translate(mapping, src))
        tokens.append(PAIR_SEP)
    tokens.append(END_SUPPORT)
    tokens.extend(int(q) for q in query)
    tokens.append(EOS)
    answer_start = len(tokens)
    tokens.extend([PLACEHOLDER] * l)

    inputs = np.array(tokens, dtype=np.int64)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[answer_start:] = True
    return TaskEpisode(kind="dictionary", inputs=inputs,
                       targets=translate(mapping, query),
                       target_mask=mask, vocab_size=DICT_VOCAB)


def gen_double_copy(length: int, alphabet: int, rng: np.random.Generator) -> TaskEpisode:
    """Emit the input sequence twice: [s EOS PLACEHOLDER x 2*length]."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if alphabet < 1 or alphabet > COPY_EOS:
        raise ValueError(f"alphabet must be in 1..{COPY_EOS}")
    s = rng.integers(0, alphabet, size=length)
    inputs = np.concatenate([
        s, [COPY_EOS], np.full(2 * length, COPY_PLACEHOLDER, dtype=np.int64)])
    mask = np.zeros(len(inputs), dtype=bool)
    mask[length + 1:] = True
    return TaskEpisode(kind="double_copy", inputs=inputs.astype(np.int64),
                       targets=np.concatenate([s, s]).astype(np.int64),
                       target_mask=mask, vocab_size=COPY_VOCAB)


def gen_priority_sort(n: int, m: int, rng: np.random.Generator) -> TaskEpisode:
    """Present n prioritized bit vectors; answer the top m by priority.

    Inputs are channel vectors: 8 bits, a priority drawn uniformly from
    [-1, 1] (redrawn on ties), and an answer-phase marker.  Targets are the
    m highest-priority bit vectors in descending priority order.
    """
    if n < 1 or m < 1 or m > n:
        raise ValueError("need 1 <= m <= n")
    bits = rng.integers(0, 2, size=(n, SORT_BITS)).astype(np.float64)
    priorities = rng.uniform(-1.0, 1.0, size=n)
    while len(np.unique(priorities)) != n:
        priorities = rng.uniform(-1.0, 1.0, size=n)
    order = np.argsort(-priorities, kind="stable")

    inputs = np.zeros((n + m, SORT_CHANNELS), dtype=np.float64)
    inputs[:n, :SORT_BITS] = bits
    inputs[:n, SORT_BITS] = priorities
    inputs[n:, SORT_BITS + 1] = 1.0
    mask = np.zeros(n + m, dtype=bool)
    mask[n:] = True
    return TaskEpisode(kind="priority_sort", inputs=inputs,
                       targets=bits[order[:m]], target_mask=mask,
                       vocab_size=None)


def episode_to_text(ep: TaskEpisode) -> str:
    """Line format: kind / inputs / targets / mask, sections split by '|'."""
    def fmt(arr):
        return " ".join(repr(x) if isinstance(x, float) else str(x)
                        for x in np.asarray(arr).reshape(-1).tolist())
    head = f"{ep.kind} {ep.vocab_size if ep.vocab_size is not None else -1}"
    head += f" {ep.inputs.shape[1] if ep.inputs.ndim == 2 else 0}"
    head += f" {ep.targets.shape[1] if ep.targets.ndim == 2 else 0}"
    mask = " ".join("1" if b else "0" for b in ep.target_mask)
    return " | ".join([head, fmt(ep.inputs), fmt(ep.targets), mask])


def episode_from_text(line: str) -> TaskEpisode:
    head, inputs, targets, mask = [part.strip() for part in line.split("|")]
    kind, vocab, in_cols, tgt_cols = head.split()
    vocab = None if vocab == "-1" else int(vocab)
    in_cols, tgt_cols = int(in_cols), int(tgt_cols)
    mask_arr = np.array([c == "1" for c in mask.split()], dtype=bool)

    def parse(text, cols, as_int):
        vals = np.array([float(x) for x in text.split()])
        if as_int:
            vals = vals.astype(np.int64)
        return vals.reshape(-1, cols) if cols else vals

    return TaskEpisode(kind=kind,
                       inputs=parse(inputs, in_cols, vocab is not None),
                       targets=parse(targets, tgt_cols, vocab is not None),
                       target_mask=mask_arr, vocab_size=vocab)
