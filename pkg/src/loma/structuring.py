"""Chunked training layout: READ | MEM | REP zones, labels, masks, position ids.

Each chunk holds ``tc`` document tokens (READ), ``t`` memory tokens (MEM) and
``tc`` repetition tokens (REP). Masks are boolean arrays, True meaning the
query row may attend the key column.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass

import numpy as np

from .tokenizer import PAD_ID, VOCAB, plan_lengths

IGNORE = -1


class Zone(enum.IntEnum):
    READ = 0
    MEM = 1
    REP = 2
    PAD = 3


class EmptySampleError(ValueError):
    pass


@dataclass(frozen=True)
class LomaParams:
    c: int
    t: int

    def __post_init__(self):
        if self.c < 1 or self.t < 1:
            raise ValueError(f"LomaParams needs c >= 1 and t >= 1, got c={self.c}, t={self.t}")

    @property
    def read_len(self) -> int:
        return self.t * self.c

    @property
    def span(self) -> int:
        return self.t * (2 * self.c + 1)


def build_chunk_mask(p: LomaParams) -> np.ndarray:
    """Single-chunk mask of shape ``(span, span)``."""
    r, t = p.read_len, p.t
    m = np.zeros((p.span, p.span), dtype=bool)
    m[:r, :r] = np.tri(r, dtype=bool)
    m[r : r + t, : r + t] = True
    m[r + t :, r : r + t] = True
    m[r + t :, r + t :] = np.eye(r, dtype=bool)
    return m


def build_cross_chunk_block(p: LomaParams) -> np.ndarray:
    """Block placed below the diagonal: READ rows see an earlier chunk's MEM."""
    r, t = p.read_len, p.t
    s = np.zeros((p.span, p.span), dtype=bool)
    s[:r, r : r + t] = True
    return s


def build_sample_mask(p: LomaParams, n_chunks: int) -> np.ndarray:
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    span = p.span
    chunk = build_chunk_mask(p)
    cross = build_cross_chunk_block(p)
    m = np.zeros((n_chunks * span, n_chunks * span), dtype=bool)
    for i in range(n_chunks):
        rows = slice(i * span, (i + 1) * span)
        m[rows, rows] = chunk
        for j in range(i):
            m[rows, j * span : (j + 1) * span] = cross
    return m


def build_position_ids(p: LomaParams, n_chunks: int) -> np.ndarray:
    """Position ids for ``n_chunks`` chunks.

    READ keeps the document positions, MEM takes every ``c``-th of them
    (ending on the chunk's last READ id), REP mirrors the READ ids.
    """
    r, t, c = p.read_len, p.t, p.c
    out = np.empty(n_chunks * p.span, dtype=np.int64)
    for i in range(n_chunks):
        base = i * p.span
        read_ids = np.arange(i * r, (i + 1) * r)
        out[base : base + r] = read_ids
        out[base + r : base + r + t] = i * r + c * np.arange(1, t + 1) - 1
        out[base + r + t : base + p.span] = read_ids
    return out


@dataclass
class StructuredSample:
    tokens: np.ndarray
    labels: np.ndarray  # IGNORE where absent
    position_ids: np.ndarray
    mask: np.ndarray
    zones: np.ndarray  # Zone values
    chunk_index: np.ndarray  # -1 on trailing padding
    params: LomaParams
    n_chunks: int

    def __len__(self):
        return len(self.tokens)

    def zone_positions(self, zone: Zone, chunk: int | None = None) -> np.ndarray:
        sel = self.zones == zone
        if chunk is not None:
            sel &= self.chunk_index == chunk
        return np.flatnonzero(sel)


def zone_layout(p: LomaParams, n_chunks: int) -> tuple[np.ndarray, np.ndarray]:
    per_chunk = np.concatenate(
        [
            np.full(p.read_len, Zone.READ),
            np.full(p.t, Zone.MEM),
            np.full(p.read_len, Zone.REP),
        ]
    ).astype(np.int8)
    zones = np.tile(per_chunk, n_chunks)
    chunk = np.repeat(np.arange(n_chunks), p.span)
    return zones, chunk


def build_sample(doc, p: LomaParams, s_hat: int, vocab=VOCAB) -> StructuredSample:
    """Lay a document out as consecutive training chunks padded to ``s_hat``.

    A trailing partial piece is filled with PAD inside its READ zone; those
    slots carry no labels in either READ or REP.
    """
    doc = np.asarray(doc, dtype=np.int64)
    if doc.size == 0:
        raise EmptySampleError("cannot structure an empty document")
    plan = plan_lengths(len(doc), p.t, p.c, s_hat)
    r, t = p.read_len, p.t
    n = -(-len(doc) // r)
    read = np.full(n * r, PAD_ID, dtype=np.int64)
    read[: len(doc)] = doc
    real = np.zeros(n * r, dtype=bool)
    real[: len(doc)] = True
    next_tok = np.full(n * r, IGNORE, dtype=np.int64)
    next_tok[: len(doc) - 1] = doc[1:]

    used = n * p.span
    tokens = np.full(s_hat, PAD_ID, dtype=np.int64)
    labels = np.full(s_hat, IGNORE, dtype=np.int64)
    zones = np.full(s_hat, Zone.PAD, dtype=np.int8)
    chunk_index = np.full(s_hat, -1, dtype=np.int64)
    zones[:used], chunk_index[:used] = zone_layout(p, n)
    position_ids = np.empty(s_hat, dtype=np.int64)
    position_ids[:used] = build_position_ids(p, n)
    position_ids[used:] = n * r + np.arange(s_hat - used)

    for i in range(n):
        b = i * p.span
        piece = slice(i * r, (i + 1) * r)
        tokens[b : b + r] = read[piece]
        tokens[b + r : b + r + t] = vocab.mem_id
        tokens[b + r + t : b + p.span] = vocab.rep_id
        labels[b : b + r] = next_tok[piece]
        labels[b + r + t : b + p.span] = np.where(real[piece], read[piece], IGNORE)

    mask = np.zeros((s_hat, s_hat), dtype=bool)
    mask[:used, :used] = build_sample_mask(p, n)
    pad = np.arange(used, s_hat)
    mask[pad, pad] = True
    assert plan.structured_len == used
    return StructuredSample(tokens, labels, position_ids, mask, zones, chunk_index, p, n)


@dataclass
class SampleBatch:
    tokens: np.ndarray  # (B, T)
    labels: np.ndarray
    position_ids: np.ndarray
    mask: np.ndarray  # (B, T, T)
    zones: np.ndarray

    @classmethod
    def stack(cls, samples):
        return cls(
            np.stack([s.tokens for s in samples]),
            np.stack([s.labels for s in samples]),
            np.stack([s.position_ids for s in samples]),
            np.stack([s.mask for s in samples]),
            np.stack([s.zones for s in samples]),
        )


# -- dumps ---------------------------------------------------------------------
def mask_to_csv(mask: np.ndarray) -> str:
    return "".join(",".join("1" if v else "0" for v in row) + "\n" for row in mask)


def mask_to_rle(mask: np.ndarray) -> str:
    """One line per row: ``<row>: <bit>x<run> ...``, preceded by a shape header."""
    out = io.StringIO()
    rows, cols = mask.shape
    out.write(f"# mask {rows}x{cols}\n")
    for i, row in enumerate(mask.astype(np.int8)):
        edges = np.flatnonzero(np.diff(row)) + 1
        starts = np.concatenate([[0], edges])
        ends = np.concatenate([edges, [cols]])
        runs = " ".join(f"{row[s]}x{e - s}" for s, e in zip(starts, ends))
        out.write(f"{i}: {runs}\n")
    return out.getvalue()


def mask_from_rle(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0]
    if not header.startswith("# mask "):
        raise ValueError("missing '# mask RxC' header")
    rows, cols = (int(v) for v in header[len("# mask ") :].split("x"))
    mask = np.zeros((rows, cols), dtype=bool)
    for ln in lines[1:]:
        idx, runs = ln.split(":", 1)
        pos = 0
        for run in runs.split():
            bit, count = run.split("x")
            mask[int(idx), pos : pos + int(count)] = bit == "1"
            pos += int(count)
        if pos != cols:
            raise ValueError(f"row {idx} covers {pos} of {cols} columns")
    return mask


def position_ids_to_csv(position_ids, zones=None) -> str:
    out = io.StringIO()
    out.write("index,position_id,zone\n")
    for i, pid in enumerate(position_ids):
        z = Zone(zones[i]).name if zones is not None else ""
        out.write(f"{i},{int(pid)},{z}\n")
    return out.getvalue()
