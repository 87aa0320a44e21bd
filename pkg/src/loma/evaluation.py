"""Repetition accuracy, analytic cost comparison, and host latency tables."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .generator import GeneratorState, add_token_ids, recall_logits
from .model import KvCache, Model, causal_mask
from .structuring import LomaParams


class EmptyEvalError(ValueError):
    pass


# -- accuracy ------------------------------------------------------------------
@dataclass(frozen=True)
class AccuracyReport:
    zone_accuracy: float
    token_accuracy: float
    n_zones: int
    n_tokens: int
    zones_correct: int
    tokens_correct: int


def accuracy_from_log(decoded, targets) -> AccuracyReport:
    """Fold per-zone (decoded, target) rows into zone/token accuracy."""
    zones_ok = tokens_ok = n_tok = 0
    for d, tg in zip(decoded, targets):
        hit = np.asarray(d) == np.asarray(tg)
        tokens_ok += int(hit.sum())
        n_tok += hit.size
        zones_ok += int(hit.all())
    n_zones = len(decoded)
    if n_zones == 0:
        raise EmptyEvalError("no repetition zones to score")
    return AccuracyReport(zones_ok / n_zones, tokens_ok / n_tok, n_zones, n_tok, zones_ok, tokens_ok)


def decode_repetitions(model: Model, corpus, p: LomaParams, max_chunks=None, position_type="intermittent"):
    """Run each document through the generator chunk by chunk and decode the
    repetition slots after every compression. Returns (decoded, targets)."""
    decoded, targets = [], []
    for i in range(len(corpus)):
        doc = np.asarray(corpus[i])
        n = len(doc) // p.read_len
        if max_chunks is not None:
            n = min(n, max_chunks)
        state = GeneratorState(model, p, position_type=position_type)
        for c in range(n):
            piece = doc[c * p.read_len : (c + 1) * p.read_len]
            add_token_ids(state, piece.tolist())
            decoded.append(np.argmax(recall_logits(state), axis=-1))
            targets.append(piece)
    return decoded, targets


def eval_repetition(model: Model, corpus, p: LomaParams, max_chunks=None) -> AccuracyReport:
    decoded, targets = decode_repetitions(model, corpus, p, max_chunks)
    if not decoded:
        raise EmptyEvalError("corpus has no document spanning a full chunk")
    return accuracy_from_log(decoded, targets)


def write_accuracy_csv(rows, path):
    """``rows``: iterable of (label, AccuracyReport)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "zone_acc", "token_acc"])
        for label, rep in rows:
            w.writerow([label, repr(rep.zone_accuracy), repr(rep.token_accuracy)])


# -- cost model ----------------------------------------------------------------
class CostModel:
    """Per-inference cost ``T(l, k)`` for ``l`` new tokens over ``k`` cached ones."""

    def __call__(self, l: int, k: int) -> float:  # noqa: E741
        raise NotImplementedError


class AnalyticCost(CostModel):
    """``a*l*(k + l) + b*l + d``."""

    def __init__(self, a=1.0, b=0.0, d=0.0):
        self.a, self.b, self.d = a, b, d

    def __call__(self, l, k):  # noqa: E741
        return self.a * l * (k + l) + self.b * l + self.d


class FunctionCost(CostModel):
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, l, k):  # noqa: E741
        return self.fn(l, k)


class TableCost(CostModel):
    """Measured medians, linearly interpolated (and extrapolated) in ``k``."""

    def __init__(self, table: dict):
        self.table = {}
        for (l, k), v in table.items():  # noqa: E741
            self.table.setdefault(l, []).append((k, v))
        for l in self.table:  # noqa: E741
            self.table[l].sort()

    def __call__(self, l, k):  # noqa: E741
        if l not in self.table:
            raise KeyError(f"no measurements for l={l}")
        ks, vs = zip(*self.table[l])
        if len(ks) == 1:
            return vs[0]
        if k > ks[-1]:
            slope = (vs[-1] - vs[-2]) / (ks[-1] - ks[-2])
            return vs[-1] + slope * (k - ks[-1])
        return float(np.interp(k, ks, vs))


@dataclass(frozen=True)
class CostComparison:
    m: int
    vanilla: float
    loma_read: float
    loma_compress: float
    vanilla_peak_cache: int
    loma_peak_cache: int
    memory_factor: float

    @property
    def loma(self) -> float:
        return self.loma_read + self.loma_compress


def predict_costs(cm: CostModel, p: LomaParams, m: int) -> CostComparison:
    """Cost of generating ``m`` chunks of ``tc`` tokens with and without LoMA.

    Vanilla decodes every token against the full cache; LoMA decodes chunk
    ``y`` against ``y*t`` memory entries plus its own growing tail and pays
    one ``T(tc, t)`` compression pass per chunk.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    t, tc = p.t, p.read_len
    vanilla = sum(cm(1, k) for k in range(m * tc))
    read = sum(cm(1, k) for y in range(m) for k in range(y * t, y * t + tc))
    compress = m * cm(tc, t)
    return CostComparison(
        m=m,
        vanilla=vanilla,
        loma_read=read,
        loma_compress=compress,
        vanilla_peak_cache=m * tc,
        loma_peak_cache=(m - 1) * t + tc,
        memory_factor=float(p.c),
    )


def crossover_chunks(cm: CostModel, p: LomaParams, m_max: int = 10_000) -> int | None:
    """Smallest chunk count at which LoMA is cheaper than vanilla, if any."""
    for m in range(1, m_max + 1):
        r = predict_costs(cm, p, m)
        if r.loma < r.vanilla:
            return m
    return None


def write_cost_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "vanilla_cost", "loma_cost", "peak_cache"])
        for r in rows:
            w.writerow([r.m, repr(r.vanilla), repr(r.loma), r.loma_peak_cache])


# -- latency ---------------------------------------------------------------------
def _random_cache(model: Model, k: int, rng) -> KvCache:
    cfg = model.cfg
    shape = (1, cfg.n_heads, k, cfg.d_head)
    return KvCache(
        [rng.standard_normal(shape).astype(cfg.np_dtype) for _ in range(cfg.n_layers)],
        [rng.standard_normal(shape).astype(cfg.np_dtype) for _ in range(cfg.n_layers)],
        np.arange(k),
    )


def measure_latency(model: Model, lengths, cache_lengths, repeats: int = 7, seed: int = 0) -> dict:
    """Median wall-clock milliseconds of one forward of ``l`` tokens over ``k``
    cached entries, for every ``(l, k)`` on the grid.

    BLAS is pinned to one thread while timing so the grid is stable run to run.
    """
    rng = np.random.default_rng(seed)
    table = {}
    with T.no_grad(), threadpool_limits(limits=1, user_api="blas"):
        for k in cache_lengths:
            cache = _random_cache(model, k, rng)
            for l in lengths:  # noqa: E741
                tokens = rng.integers(0, 256, size=l)
                pos = np.arange(k, k + l)
                mask = causal_mask(l, k)
                model(tokens, pos, mask, cache)  # warm-up
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    model(tokens, pos, mask, cache)
                    times.append(time.perf_counter() - t0)
                table[(l, k)] = 1e3 * float(np.median(times))
    return table


def write_latency_csv(table: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l", "k", "median_ms"])
        for (l, k), v in sorted(table.items()):  # noqa: E741
            w.writerow([l, k, f"{v:.6f}"])


def latency_slope(table: dict, l: int = 1) -> float:
    """Least-squares slope of ``T(l, k)`` in ``k`` (ms per cached entry)."""
    pts = sorted((k, v) for (ll, k), v in table.items() if ll == l)
    ks, vs = np.array(pts, dtype=float).T
    return float(np.polyfit(ks, vs, 1)[0])


def batching_fraction(table: dict, l: int = 16) -> float:
    """Fraction of grid cache lengths with ``T(l, k) <= l * T(1, k)``."""
    ks = sorted(k for (ll, k) in table if ll == l and (1, k) in table)
    if not ks:
        raise ValueError(f"table lacks paired l=1 and l={l} measurements")
    return sum(table[(l, k)] <= l * table[(1, k)] for k in ks) / len(ks)
