"""Two-part loss, optimisation loop, and gradient-flow verification."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import Model, ShapeError
from .structuring import IGNORE, LomaParams, SampleBatch, StructuredSample, Zone, build_sample
from .tokenizer import max_doc_len, plan_lengths

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class GradientFlowError(AssertionError):
    """A gradient-flow property does not hold; the message names it."""


# -- loss ----------------------------------------------------------------------
@dataclass
class LossReport:
    """Summed cross-entropies (nats) per chunk and in total."""

    read_loss: np.ndarray
    rep_loss: np.ndarray
    n_read: np.ndarray
    n_rep: np.ndarray

    @property
    def L_read(self) -> float:
        return float(self.read_loss.sum())

    @property
    def L_rep(self) -> float:
        return float(self.rep_loss.sum())

    @property
    def L(self) -> float:
        return float((self.read_loss + self.rep_loss).sum())

    @property
    def read_per_token(self) -> float:
        return self.L_read / max(int(self.n_read.sum()), 1)

    @property
    def rep_per_token(self) -> float:
        return self.L_rep / max(int(self.n_rep.sum()), 1)


def _per_position_ce(logits, labels):
    v = logits.shape[-1]
    flat = logits.reshape(-1, v) if isinstance(logits, T.Tensor) else T.Tensor(np.asarray(logits).reshape(-1, v))
    return T.cross_entropy(flat, np.asarray(labels).reshape(-1), reduction="none")


def compute_loss(logits, sample: StructuredSample) -> LossReport:
    """Per-chunk READ (next token) and REP (mirrored token) losses.

    MEM and PAD positions carry no labels and contribute nothing.
    """
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    if data.shape[:-1] != sample.labels.shape:
        raise ShapeError(f"logits {data.shape} not aligned with {len(sample)} sample positions")
    ce = _per_position_ce(data, sample.labels).data
    labelled = sample.labels != IGNORE
    n = sample.n_chunks
    read_loss, rep_loss = np.zeros(n), np.zeros(n)
    n_read, n_rep = np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    for i in range(n):
        in_chunk = sample.chunk_index == i
        rd = in_chunk & (sample.zones == Zone.READ) & labelled
        rp = in_chunk & (sample.zones == Zone.REP) & labelled
        read_loss[i], rep_loss[i] = ce[rd].sum(), ce[rp].sum()
        n_read[i], n_rep[i] = rd.sum(), rp.sum()
    return LossReport(read_loss, rep_loss, n_read, n_rep)


def loss_terms(logits: T.Tensor, labels, zones):
    """Differentiable summed READ and REP losses plus their token counts."""
    labels = np.asarray(labels).reshape(-1)
    zones = np.asarray(zones).reshape(-1)
    ce = _per_position_ce(logits, labels)
    labelled = labels != IGNORE
    w_read = ((zones == Zone.READ) & labelled).astype(ce.dtype)
    w_rep = ((zones == Zone.REP) & labelled).astype(ce.dtype)
    read = T.tsum(T.mul(ce, w_read))
    rep = T.tsum(T.mul(ce, w_rep))
    return read, rep, int(w_read.sum()), int(w_rep.sum())


# -- schedule and optimiser ------------------------------------------------------
@dataclass
class TrainConfig:
    lr_max: float = 3e-4
    lr_min: float = 3e-5
    warmup_steps: int = 100
    batch_size: int = 8
    max_steps: int = 20000
    seed: int = 0
    eval_every: int = 0
    rep_weight: float = 1.0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    s_hat: int = 60
    smooth_window: int = 50
    stop_rep_loss: float | None = None
    log_every: int = 100

    def lr(self, step: int) -> float:
        """Linear warmup min->max, then cosine max->min at ``max_steps``."""
        if step < self.warmup_steps:
            return self.lr_min + (self.lr_max - self.lr_min) * step / self.warmup_steps
        span = max(self.max_steps - self.warmup_steps, 1)
        frac = min((step - self.warmup_steps) / span, 1.0)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * frac))


def decay_masks(model: Model) -> dict[str, np.ndarray | float]:
    """Weight-decay multipliers: none on norms, none on special-token rows."""
    masks = {}
    for name, p in model.named_parameters():
        if name.endswith("norm"):
            masks[name] = 0.0
        elif name == "embed":
            m = np.ones((p.shape[0], 1), dtype=p.dtype)
            m[model.cfg.base_vocab :] = 0.0
            masks[name] = m
        else:
            masks[name] = 1.0
    return masks


class AdamW:
    def __init__(self, model: Model, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.01):
        self.model = model
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.decay = decay_masks(model)
        self.m = {k: np.zeros_like(p.data) for k, p in model.named_parameters()}
        self.v = {k: np.zeros_like(p.data) for k, p in model.named_parameters()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.model.named_parameters():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd:
                p.data -= lr * self.wd * self.decay[name] * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(model: Model, max_norm: float) -> float:
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in model.parameters():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- training loop -------------------------------------------------------------
@dataclass
class StepLog:
    step: int
    L: float
    L_read: float
    L_rep: float
    lr: float


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    stopped_early: bool = False

    def smoothed_rep(self, window: int) -> np.ndarray:
        rep = np.array([h.L_rep for h in self.history])
        if len(rep) == 0:
            return rep
        return np.array([rep[max(0, i - window + 1) : i + 1].mean() for i in range(len(rep))])


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L", "L_Read", "L_Rep", "lr"])
        for h in history:
            w.writerow([h.step, repr(h.L), repr(h.L_read), repr(h.L_rep), repr(h.lr)])


def make_batch(corpus, p: LomaParams, s_hat: int, indices) -> SampleBatch:
    limit = max_doc_len(p.t, p.c, s_hat)
    return SampleBatch.stack([build_sample(corpus[int(i)][:limit], p, s_hat) for i in indices])


def train_step(model: Model, batch: SampleBatch, rep_weight: float = 1.0):
    """Forward + backward on one batch. Returns per-token (L_read, L_rep)."""
    logits, _ = model(batch.tokens, batch.position_ids, batch.mask)
    read, rep, n_read, n_rep = loss_terms(logits, batch.labels, batch.zones)
    read_tok = T.mul(read, 1.0 / max(n_read, 1))
    rep_tok = T.mul(rep, 1.0 / max(n_rep, 1))
    objective = T.add(read_tok, T.mul(rep_tok, rep_weight))
    objective.backward()
    return read_tok.item(), rep_tok.item()


def train(model: Model, corpus, p: LomaParams, cfg: TrainConfig, callback=None) -> TrainResult:
    """Optimise the LoMA objective on structured batches drawn from ``corpus``.

    Logged L_Read / L_Rep are per-token means; L is their sum. Stops at
    ``max_steps`` or once the smoothed L_Rep drops below ``stop_rep_loss``.
    """
    plan_lengths(min(len(corpus[0]), max_doc_len(p.t, p.c, cfg.s_hat)), p.t, p.c, cfg.s_hat)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model, cfg.betas, weight_decay=cfg.weight_decay)
    result = TrainResult(model)
    recent: list[float] = []
    for step in range(cfg.max_steps):
        idx = rng.integers(0, len(corpus), size=cfg.batch_size)
        batch = make_batch(corpus, p, cfg.s_hat, idx)
        model.zero_grad()
        lr = cfg.lr(step)
        l_read, l_rep = train_step(model, batch, cfg.rep_weight)
        if not (math.isfinite(l_read) and math.isfinite(l_rep)):
            raise TrainingDivergedError(f"non-finite loss at step {step}: L_Read={l_read}, L_Rep={l_rep}")
        clip_grad_norm(model, cfg.grad_clip)
        opt.step(lr)
        entry = StepLog(step, l_read + l_rep, l_read, l_rep, lr)
        result.history.append(entry)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d L=%.4f L_Read=%.4f L_Rep=%.4f lr=%.2e", step, entry.L, l_read, l_rep, lr)
        if callback is not None:
            callback(entry, model)
        recent.append(l_rep)
        if len(recent) > cfg.smooth_window:
            recent.pop(0)
        if (
            cfg.stop_rep_loss is not None
            and len(recent) == cfg.smooth_window
            and float(np.mean(recent)) < cfg.stop_rep_loss
        ):
            result.stopped_early = True
            break
    return result


# -- gradient flow ---------------------------------------------------------------
@dataclass
class GradFlowReport:
    mem_kv_grad_norm: float
    mem_logit_grad_max: float
    read_embed_grad_norm: float
    fd_max_rel_err: float | None
    n_layers: int

    @property
    def ok(self) -> bool:
        flow_needed = self.n_layers >= 2
        return (
            self.mem_kv_grad_norm > 0
            and self.mem_logit_grad_max == 0.0
            and (self.read_embed_grad_norm > 0 or not flow_needed)
            and (self.fd_max_rel_err is None or self.fd_max_rel_err < 1e-4)
        )


def sample_loss(model: Model, sample: StructuredSample, rep_weight=1.0, record=None):
    """Summed objective ``L_read + rep_weight * L_rep`` as a tensor graph."""
    logits, _ = model(sample.tokens, sample.position_ids, sample.mask, record=record)
    if record is not None:
        record["logits"] = logits
    read, rep, _, _ = loss_terms(logits, sample.labels, sample.zones)
    return read, rep


def finite_difference_check(model: Model, loss_fn, h=1e-5, coords_per_block=None, seed=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    With ``coords_per_block`` set, each parameter block is checked along a
    random direction over that many coordinates instead of coordinatewise.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    model.zero_grad()
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in model.named_parameters()}
    rng = np.random.default_rng(seed)
    worst = 0.0

    def value():
        with T.no_grad():
            return loss_fn().item()

    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        if coords_per_block is None:
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                up = value()
                flat[j] = old - h
                down = value()
                flat[j] = old
                num = (up - down) / (2 * h)
                worst = max(worst, abs(ga[j] - num) / max(abs(ga[j]), abs(num), 1e-8))
        else:
            k = min(coords_per_block, flat.size)
            sel = rng.choice(flat.size, size=k, replace=False)
            u = rng.standard_normal(k)
            old = flat[sel].copy()
            flat[sel] = old + h * u
            up = value()
            flat[sel] = old - h * u
            down = value()
            flat[sel] = old
            num = (up - down) / (2 * h)
            ana = float(ga[sel] @ u)
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    model.zero_grad()
    return worst


def verify_gradient_flow(model: Model, sample: StructuredSample, fd_check=True, coords_per_block=None) -> GradFlowReport:
    """Check that the repetition loss supervises the memory zone.

    (a) dL_rep reaches MEM keys/values, (b) dL at MEM logits is exactly
    zero, (c) dL_rep reaches READ embeddings through MEM when the model has
    two or more layers, (d) analytic gradients agree with finite differences.
    Raises :class:`GradientFlowError` naming the first violated property.
    """
    if sample.n_chunks < 1:
        raise ValueError("sample has no chunks")
    mem = sample.zones == Zone.MEM
    read = sample.zones == Zone.READ

    model.zero_grad()
    rec: dict = {}
    _, rep = sample_loss(model, sample, record=rec)
    for t in [rec["embed"], *rec["k"], *rec["v"]]:
        t.grad = None
    rep.backward()
    kv_norm = 0.0
    for t in [*rec["k"], *rec["v"]]:
        if t.grad is not None:
            kv_norm += float(np.abs(t.grad[0][:, mem]).sum())
    emb_grad = rec["embed"].grad
    read_norm = 0.0 if emb_grad is None else float(np.abs(emb_grad[0][read]).sum())

    model.zero_grad()
    rec = {}
    read_l, rep_l = sample_loss(model, sample, record=rec)
    T.add(read_l, rep_l).backward()
    lg = rec["logits"].grad
    mem_logit_max = float(np.abs(lg[mem]).max()) if lg is not None else 0.0
    model.zero_grad()

    fd = None
    if fd_check:
        def total():
            r, p = sample_loss(model, sample)
            return T.add(r, p)

        fd = finite_difference_check(model, total, coords_per_block=coords_per_block)

    report = GradFlowReport(kv_norm, mem_logit_max, read_norm, fd, model.cfg.n_layers)
    if not kv_norm > 0:
        raise GradientFlowError("(a) L_Rep gradient does not reach memory-zone keys/values")
    if mem_logit_max != 0.0:
        raise GradientFlowError(f"(b) MEM-position logits receive gradient {mem_logit_max}")
    if model.cfg.n_layers >= 2 and not read_norm > 0:
        raise GradientFlowError("(c) L_Rep gradient does not reach READ embeddings")
    if fd is not None and not fd < 1e-4:
        raise GradientFlowError(f"(d) finite-difference mismatch: max relative error {fd:.3e}")
    return report
