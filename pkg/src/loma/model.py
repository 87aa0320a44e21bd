"""Pre-norm decoder-only transformer with rotary positions and a KV cache.

Attention masks and position ids are always supplied by the caller, so the
same forward pass serves plain causal decoding, LoMA training samples, and
memory compression against a partial cache.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tokenizer import VOCAB

CHECKPOINT_FORMAT = "loma-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class ShapeError(T.DimensionError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_head: int | None = None
    d_ff: int | None = None
    vocab_size: int = VOCAB.size
    base_vocab: int = VOCAB.base_size
    max_position: int = 4096
    rope_base: float = 10000.0
    init_std: float = 0.02
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_head is None:
            if self.n_heads < 1 or self.d_model % self.n_heads:
                raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
            object.__setattr__(self, "d_head", self.d_model // self.n_heads)
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 16 * -(-8 * self.d_model // (3 * 16)))
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_position) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}")
        if self.d_head % 2:
            raise ConfigError("d_head must be even for rotary embeddings")
        if self.vocab_size < self.base_vocab + 2:
            raise ConfigError(f"vocab_size={self.vocab_size} leaves no room for <m> and <r>")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class KvCache:
    """Per-layer keys/values ``(B, H, L, d_head)`` plus per-entry position ids.

    Keys are stored already rotated at their own position id.
    """

    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    compressed_len: int = 0

    @classmethod
    def empty(cls, cfg: ModelConfig, batch: int = 1):
        shape = (batch, cfg.n_heads, 0, cfg.d_head)
        z = [np.zeros(shape, dtype=cfg.np_dtype) for _ in range(cfg.n_layers)]
        return cls(z, [a.copy() for a in z])

    @property
    def total_len(self) -> int:
        return len(self.positions)

    def __len__(self):
        return self.total_len

    def slice(self, start, stop=None):
        sl = slice(start, stop)
        return KvCache(
            [k[:, :, sl] for k in self.keys],
            [v[:, :, sl] for v in self.values],
            self.positions[sl],
            0,
        )

    def concat(self, other: "KvCache") -> "KvCache":
        return KvCache(
            [np.concatenate([a, b], axis=2) for a, b in zip(self.keys, other.keys)],
            [np.concatenate([a, b], axis=2) for a, b in zip(self.values, other.values)],
            np.concatenate([self.positions, other.positions]),
            self.compressed_len,
        )

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys) + sum(a.nbytes for a in self.values)


def extend_vocab_rows(base: np.ndarray, n_new: int, rng) -> np.ndarray:
    """Append ``n_new`` rows drawn per-column from N(mean, var) of ``base``."""
    mu = base.mean(axis=0)
    sd = base.std(axis=0)
    new = mu + sd * rng.standard_normal((n_new, base.shape[1]))
    return np.concatenate([base, new.astype(base.dtype)], axis=0)


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, T.Tensor]):
        self.cfg = cfg
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    def copy(self):
        return Model(self.cfg, {k: T.parameter(v.data.copy(), v.dtype) for k, v in self.params.items()})

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, tokens, position_ids, mask, cache: KvCache | None = None, record=None):
        """Run the stack over ``tokens`` attending ``cache`` entries then the new ones.

        ``tokens``/``position_ids`` are ``(T,)`` or ``(B, T)``; ``mask`` is
        ``(T, L + T)`` or ``(B, T, L + T)`` with ``L = cache.total_len``.
        Returns ``(logits, new_cache)``; logits match the rank of ``tokens``.
        If ``record`` is a dict it receives the embedding output and per-layer
        k/v tensors (new entries only) for gradient inspection.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        b, n = tokens.shape
        pos = np.asarray(position_ids, dtype=np.int64)
        if pos.shape[-1] != n or pos.ndim > 2:
            raise ShapeError(f"position_ids shape {pos.shape} vs {n} tokens")
        if pos.size and (pos.min() < 0 or pos.max() >= cfg.max_position):
            raise ShapeError(f"position ids must lie in [0, {cfg.max_position})")
        pos2 = pos if pos.ndim == 2 else pos[None]
        if cache is None:
            cache = KvCache.empty(cfg, b)
        past = cache.total_len
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (n, past + n) or mask.ndim not in (2, 3):
            raise ShapeError(f"mask shape {mask.shape} != ({n}, {past + n}) for {past} cached entries")
        if cache.keys and cache.keys[0].shape[0] != b:
            raise ShapeError(f"cache batch {cache.keys[0].shape[0]} != token batch {b}")

        P = self.params
        h, dh = cfg.n_heads, cfg.d_head
        scale = T.scaled_dot_scale(dh)
        x = T.embedding(P["embed"], tokens)
        if record is not None:
            record["embed"] = x
            record["k"], record["v"] = [], []
        new_keys, new_values = [], []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            a = T.rms_norm(x, P[pre + "attn_norm"])
            qkv = T.matmul(a, P[pre + "wqkv"]).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
            q = T.rope(qkv[0], pos2, cfg.rope_base)
            k = T.rope(qkv[1], pos2, cfg.rope_base)
            v = qkv[2]
            if record is not None:
                record["k"].append(k)
                record["v"].append(v)
            new_keys.append(k.data)
            new_values.append(v.data)
            if past:
                k = T.concat([T.Tensor(cache.keys[i]), k], axis=2)
                v = T.concat([T.Tensor(cache.values[i]), v], axis=2)
            scores = T.matmul(q, k.transpose(0, 1, 3, 2))
            probs = T.masked_softmax(scores, mask, scale)
            o = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, n, cfg.d_model)
            x = x + T.matmul(o, P[pre + "wo"])
            m = T.rms_norm(x, P[pre + "mlp_norm"])
            gate = T.silu(T.matmul(m, P[pre + "w_gate"]))
            x = x + T.matmul(gate * T.matmul(m, P[pre + "w_up"]), P[pre + "w_down"])
        x = T.rms_norm(x, P["final_norm"])
        logits = T.matmul(x, P["lm_head"])
        if single:
            logits = logits.reshape(n, cfg.vocab_size)
        appended = KvCache(new_keys, new_values, pos2[0].copy(), 0)
        new_cache = cache.concat(appended) if past else appended
        new_cache.compressed_len = cache.compressed_len
        return logits, new_cache


def forward(model: Model, tokens, position_ids, mask, cache=None, record=None):
    return model.forward(tokens, position_ids, mask, cache, record)


def init_model(cfg: ModelConfig) -> Model:
    """Seeded initialisation; the two special-token embedding rows are drawn
    from the per-dimension statistics of the ordinary rows."""
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    d, std = cfg.d_model, cfg.init_std
    out_std = std / np.sqrt(2 * cfg.n_layers)

    def normal(shape, s):
        return (rng.standard_normal(shape) * s).astype(dt)

    n_special = cfg.vocab_size - cfg.base_vocab
    params = {"embed": extend_vocab_rows(normal((cfg.base_vocab, d), std), n_special, rng)}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        params[pre + "attn_norm"] = np.ones(d, dtype=dt)
        params[pre + "wqkv"] = normal((d, 3 * d), std)
        params[pre + "wo"] = normal((d, d), out_std)
        params[pre + "mlp_norm"] = np.ones(d, dtype=dt)
        params[pre + "w_gate"] = normal((d, cfg.d_ff), std)
        params[pre + "w_up"] = normal((d, cfg.d_ff), std)
        params[pre + "w_down"] = normal((cfg.d_ff, d), out_std)
    params["final_norm"] = np.ones(d, dtype=dt)
    params["lm_head"] = normal((d, cfg.vocab_size), std)
    return Model(cfg, {k: T.parameter(v, dt) for k, v in params.items()})


def causal_mask(n, past=0):
    """Lower-triangular mask over ``past`` cached entries plus ``n`` new ones."""
    return np.tri(n, n + past, k=past, dtype=bool)


# -- checkpoints ---------------------------------------------------------------
def save_checkpoint(model: Model, path, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def read_checkpoint_header(path) -> dict:
    with np.load(path) as z:
        return json.loads(z["__header__"].tobytes().decode())


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a LoMA checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig(**header["config"])
        params = {k[len("param/") :]: T.parameter(z[k], cfg.np_dtype) for k in z.files if k.startswith("param/")}
    return Model(cfg, params)


def with_dtype(cfg: ModelConfig, dtype: str) -> ModelConfig:
    return replace(cfg, dtype=dtype)
