"""Greedy generation that compresses the KV cache every ``tc`` tokens.

Tokens are buffered; whenever the buffer fills the current chunk's remaining
read capacity, that slice is run through the model and the chunk's ``tc``
cache entries are replaced by the keys/values of ``t`` memory tokens computed
in one extra pass. Memory entries are never recompressed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import KvCache, Model, causal_mask
from .structuring import LomaParams
from .tokenizer import VOCAB


class CapacityError(RuntimeError):
    pass


class CompressionStateError(RuntimeError):
    pass


@dataclass
class CompressionEvent:
    step: int
    pre_len: int
    post_len: int


@dataclass
class GenerationTrace:
    tokens: list = field(default_factory=list)
    cache_lengths: list = field(default_factory=list)
    peak_lengths: list = field(default_factory=list)
    compressed_chunks: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "tokens": [int(t) for t in self.tokens],
            "cache_lengths": self.cache_lengths,
            "peak_lengths": self.peak_lengths,
            "compressed_chunks": self.compressed_chunks,
            "compression_events": [vars(e) for e in self.events],
        }


@dataclass
class GeneratorState:
    model: Model
    params: LomaParams | None  # None disables compression
    position_type: str = "intermittent"
    max_len: int = 256
    mem_id: int = VOCAB.mem_id
    cursor: int = 0
    compressed_chunks: int = 0
    input_buffer: list = field(default_factory=list)
    cache: KvCache | None = None
    last_logits: np.ndarray | None = None
    # bookkeeping for traces
    step_index: int = 0
    step_peak: int = 0
    events: list = field(default_factory=list)

    def __post_init__(self):
        if self.position_type not in ("intermittent", "sequential"):
            raise ValueError(f"position_type must be intermittent or sequential, got {self.position_type!r}")

    @property
    def mem_len(self) -> int:
        return 0 if self.params is None else self.params.t

    @property
    def read_len(self) -> int:
        return 0 if self.params is None else self.params.read_len

    @property
    def cache_len(self) -> int:
        return 0 if self.cache is None else self.cache.total_len

    @property
    def uncompressed_len(self) -> int:
        return self.cache_len - self.compressed_chunks * self.mem_len

    def reset(self):
        self.cursor = 0
        self.compressed_chunks = 0
        self.input_buffer = []
        self.cache = None
        self.last_logits = None
        self.step_index = 0
        self.step_peak = 0
        self.events = []


def step_infer(state: GeneratorState, token_ids) -> int:
    """Run ``token_ids`` at positions ``cursor...`` against the whole cache.

    Returns the greedy next token after the last input.
    """
    token_ids = list(token_ids)
    if not token_ids:
        raise ValueError("step_infer needs at least one token")
    n = len(token_ids)
    if state.cursor + n > state.model.cfg.max_position:
        raise CapacityError(
            f"position {state.cursor + n - 1} exceeds max_position {state.model.cfg.max_position}"
        )
    past = state.cache_len
    pos = np.arange(state.cursor, state.cursor + n)
    with T.no_grad():
        logits, cache = state.model(np.asarray(token_ids), pos, causal_mask(n, past), state.cache)
    cache.compressed_len = state.compressed_chunks * state.mem_len
    state.cache = cache
    state.cursor += n
    state.step_peak = max(state.step_peak, cache.total_len)
    state.last_logits = logits.data[-1]
    return int(np.argmax(state.last_logits))


def memory_position_ids(state: GeneratorState) -> np.ndarray:
    p = state.params
    if state.position_type == "intermittent":
        return np.arange(state.cursor - p.read_len + p.c - 1, state.cursor, p.c)
    start = state.compressed_chunks * p.t
    return np.arange(start, start + p.t)


def compress_last_chunk(state: GeneratorState) -> GeneratorState:
    """Replace the ``tc`` uncompressed cache entries by ``t`` memory entries."""
    if state.params is None:
        raise CompressionStateError("compression is disabled")
    p = state.params
    mem_cursor = state.compressed_chunks * p.t
    if state.cache is None or state.cache_len - mem_cursor != p.read_len:
        raise CompressionStateError(
            f"uncompressed tail is {state.cache_len - mem_cursor}, expected exactly {p.read_len}"
        )
    pre = state.cache_len
    read_cache = state.cache.slice(mem_cursor)
    mask = np.ones((p.t, p.read_len + p.t), dtype=bool)
    with T.no_grad():
        _, out = state.model(np.full(p.t, state.mem_id), memory_position_ids(state), mask, read_cache)
    merged = state.cache.slice(0, mem_cursor).concat(out.slice(p.read_len))
    state.compressed_chunks += 1
    merged.compressed_len = state.compressed_chunks * p.t
    state.cache = merged
    state.events.append(CompressionEvent(state.step_index, pre, merged.total_len))
    return state


def add_token_ids(state: GeneratorState, token_ids) -> int:
    """Buffer tokens, inferring and compressing whole chunks as they fill."""
    token_ids = list(token_ids)
    if not token_ids:
        raise ValueError("add_token_ids needs at least one token")
    state.input_buffer.extend(token_ids)
    last = None
    while state.mem_len > 0:
        uncomp = state.uncompressed_len
        if uncomp >= state.read_len:
            raise CompressionStateError(f"uncompressed tail {uncomp} reached read length")
        need = state.read_len - uncomp
        if len(state.input_buffer) < need:
            break
        chunk, state.input_buffer = state.input_buffer[:need], state.input_buffer[need:]
        last = step_infer(state, chunk)
        compress_last_chunk(state)
    if state.input_buffer:
        last = step_infer(state, state.input_buffer)
        state.input_buffer = []
    return last


def generate(state: GeneratorState, prompt_ids, eos_id=None) -> GenerationTrace:
    """Greedy decoding until ``eos_id`` or ``state.max_len`` emitted tokens."""
    prompt_ids = list(prompt_ids)
    if not prompt_ids:
        raise ValueError("prompt must be non-empty")
    trace = GenerationTrace()
    state.events = []

    def feed(ids):
        state.step_peak = state.cache_len
        tok = add_token_ids(state, ids)
        trace.tokens.append(tok)
        trace.cache_lengths.append(state.cache_len)
        trace.peak_lengths.append(state.step_peak)
        trace.compressed_chunks.append(state.compressed_chunks)
        state.step_index += 1
        return tok

    tok = feed(prompt_ids)
    while len(trace.tokens) < state.max_len and (eos_id is None or tok != eos_id):
        tok = feed([tok])
    trace.events = list(state.events)
    return trace


def recall_logits(state: GeneratorState, rep_id: int = VOCAB.rep_id) -> np.ndarray:
    """Logits of ``tc`` repetition queries against the newest memory block.

    Slot ``j`` sits at the position id of the ``j``-th token of the chunk
    just compressed and sees only that chunk's ``t`` memory entries plus
    itself, matching the training mask.
    """
    p = state.params
    if p is None or state.compressed_chunks == 0 or state.uncompressed_len != 0:
        raise CompressionStateError("recall needs a freshly compressed chunk")
    mem = state.cache.slice(state.cache_len - p.t)
    pos = np.arange(state.cursor - p.read_len, state.cursor)
    mask = np.concatenate([np.ones((p.read_len, p.t), dtype=bool), np.eye(p.read_len, dtype=bool)], axis=1)
    with T.no_grad():
        logits, _ = state.model(np.full(p.read_len, rep_id), pos, mask, mem)
    return logits.data


def vanilla_generate(model: Model, prompt_ids, max_len, eos_id=None) -> list[int]:
    """Reference greedy loop: full causal recompute each step, no cache."""
    seq = list(prompt_ids)
    out = []
    with T.no_grad():
        while len(out) < max_len:
            n = len(seq)
            logits, _ = model(np.asarray(seq), np.arange(n), causal_mask(n))
            tok = int(np.argmax(logits.data[-1]))
            out.append(tok)
            if eos_id is not None and tok == eos_id:
                break
            seq.append(tok)
    return out
