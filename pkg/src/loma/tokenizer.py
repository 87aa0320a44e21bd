"""Byte-level vocabulary, corpora, and training-length planning."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258


class LengthPlanError(ValueError):
    """A sample geometry violates the training-length constraints."""


@dataclass(frozen=True)
class Vocab:
    """256 byte ids, then BOS/EOS/PAD, then the memory and repetition tokens."""

    base_size: int = 259
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID
    pad_id: int = PAD_ID

    @property
    def mem_id(self) -> int:
        return self.base_size

    @property
    def rep_id(self) -> int:
        return self.base_size + 1

    @property
    def size(self) -> int:
        return self.base_size + 2


VOCAB = Vocab()


def tokenize(text: bytes | str) -> list[int]:
    """BOS followed by one id per byte. ``str`` input is UTF-8 encoded."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return [BOS_ID, *text]


def detokenize(ids) -> bytes:
    """Inverse of :func:`tokenize`; non-byte ids (BOS, <m>, ...) are dropped."""
    return bytes(int(i) for i in ids if 0 <= int(i) < 256)


@dataclass(frozen=True)
class PlanResult:
    n_chunks: int
    chunk_span: int
    structured_len: int
    padding: int


def plan_lengths(s: int, t: int, c: int, s_hat: int) -> PlanResult:
    """Check a raw length ``s`` against training length ``s_hat``.

    ``s_hat`` must be a whole number of chunks of span ``2tc + t`` and
    ``2s + floor(s / c)`` must fit in it. ``structured_len`` is what the
    document occupies once chunked (a partial last piece takes a full
    chunk); the rest is padding.
    """
    if t < 1 or c < 1:
        raise LengthPlanError(f"need t >= 1 and c >= 1, got t={t}, c={c}")
    span = 2 * t * c + t
    if s_hat < span:
        raise LengthPlanError(f"s_hat >= t(2c+1) violated: {s_hat} < {span}")
    if s_hat % span:
        raise LengthPlanError(f"s_hat mod (2tc + t) = 0 violated: {s_hat} mod {span} = {s_hat % span}")
    if s < 0:
        raise LengthPlanError(f"negative raw length {s}")
    if 2 * s + s // c > s_hat:
        raise LengthPlanError(f"2s + floor(s/c) <= s_hat violated: {2 * s + s // c} > {s_hat}")
    read_len = t * c
    used = -(-s // read_len) * span
    return PlanResult(n_chunks=s_hat // span, chunk_span=span, structured_len=used, padding=s_hat - used)


def max_doc_len(t: int, c: int, s_hat: int) -> int:
    """Longest raw length accepted by :func:`plan_lengths`."""
    s = s_hat // 2
    while s > 0 and 2 * s + s // c > s_hat:
        s -= 1
    return s


class Corpus:
    """A list of token-id documents, each starting with BOS."""

    def __init__(self, documents):
        self.documents = [np.asarray(d, dtype=np.int64) for d in documents]
        for d in self.documents:
            if len(d) == 0 or d[0] != BOS_ID:
                raise ValueError("every document must begin with BOS")

    def __len__(self):
        return len(self.documents)

    def __getitem__(self, i):
        return self.documents[i]

    @classmethod
    def from_texts(cls, texts):
        return cls([tokenize(t) for t in texts])

    @classmethod
    def from_manifest(cls, manifest: str | Path, split_lines: bool = False):
        """Load files listed one per line in ``manifest`` (relative paths resolve
        against the manifest's directory). Each file is a document, or each
        non-empty line is when ``split_lines`` is set."""
        manifest = Path(manifest)
        root = manifest.parent
        texts = []
        for line in manifest.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            path = Path(line)
            if not path.is_absolute():
                path = root / path
            raw = path.read_bytes()
            if split_lines:
                texts.extend(chunk for chunk in raw.split(b"\n") if chunk)
            else:
                texts.append(raw)
        return cls.from_texts(texts)


class SyntheticCorpus:
    """Documents of uniformly random tokens from ``range(alphabet)``.

    Document ``i`` is a pure function of ``(seed, i)`` so the corpus can be
    arbitrarily large without being materialised.
    """

    def __init__(self, n_docs: int, doc_len: int, alphabet: int = 256, seed: int = 0):
        if not 1 <= alphabet <= 256:
            raise ValueError("alphabet must be in [1, 256]")
        if doc_len < 1:
            raise ValueError("doc_len counts BOS and must be >= 1")
        self.n_docs = n_docs
        self.doc_len = doc_len
        self.alphabet = alphabet
        self.seed = seed

    def __len__(self):
        return self.n_docs

    def __getitem__(self, i):
        if not 0 <= i < self.n_docs:
            raise IndexError(i)
        rng = np.random.default_rng([self.seed, i])
        body = rng.integers(0, self.alphabet, size=self.doc_len - 1)
        return np.concatenate([[BOS_ID], body]).astype(np.int64)
