"""``loma`` command line: train, generate, eval, perf, mask-dump.

Exit codes: 0 success, 2 configuration or file error, 3 geometry or length
constraint violation, 4 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .config import RunConfig, RunConfigError, load_config
from .generator import GeneratorState, generate
from .model import ConfigError, init_model, load_checkpoint, save_checkpoint
from .structuring import (
    LomaParams,
    build_position_ids,
    build_sample_mask,
    mask_to_csv,
    mask_to_rle,
    position_ids_to_csv,
    zone_layout,
)
from .tokenizer import (
    VOCAB,
    Corpus,
    LengthPlanError,
    SyntheticCorpus,
    detokenize,
    max_doc_len,
    plan_lengths,
    tokenize,
)
from .training import TrainingDivergedError, train, write_loss_csv

log = logging.getLogger("loma")

EXIT_OK, EXIT_CONFIG, EXIT_GEOMETRY, EXIT_NUMERIC = 0, 2, 3, 4


class GeometryError(ValueError):
    pass


def _params(cfg: RunConfig) -> LomaParams:
    try:
        return LomaParams(c=cfg.loma.c, t=cfg.loma.t)
    except ValueError as exc:
        raise GeometryError(str(exc)) from exc


def _corpus(cfg: RunConfig, eval_split=False):
    d = cfg.data
    if d.corpus == "synthetic":
        if eval_split:
            return SyntheticCorpus(d.eval_docs, d.doc_len, d.alphabet, d.eval_seed)
        return SyntheticCorpus(d.n_docs, d.doc_len, d.alphabet, d.seed)
    corpus = Corpus.from_manifest(d.corpus, d.split_lines)
    if eval_split:
        return Corpus(corpus.documents[: d.eval_docs])
    return corpus


def _checkpoint_path(cfg: RunConfig) -> Path:
    if cfg.paths.checkpoint:
        return Path(cfg.paths.checkpoint)
    return Path(cfg.paths.out) / "checkpoint.npz"


# -- commands ------------------------------------------------------------------
def cmd_train(cfg: RunConfig):
    p = _params(cfg)
    out = Path(cfg.paths.out)
    cfg.snapshot(out)
    corpus = _corpus(cfg)
    eval_corpus = _corpus(cfg, eval_split=True) if cfg.train.eval_every else None
    model = init_model(cfg.model)
    acc_rows = []

    def on_step(entry, m):
        if eval_corpus is not None and (entry.step + 1) % cfg.train.eval_every == 0:
            acc_rows.append((entry.step + 1, ev.eval_repetition(m, eval_corpus, p, cfg.eval.max_chunks)))

    result = train(model, corpus, p, cfg.train, callback=on_step)
    save_checkpoint(model, _checkpoint_path(cfg), extra={"t": p.t, "c": p.c, "steps": len(result.history)})
    write_loss_csv(result.history, out / "loss.csv")
    if acc_rows:
        ev.write_accuracy_csv(acc_rows, out / "accuracy.csv")
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"steps={len(result.history)} L={last.L:.4f} L_Read={last.L_read:.4f} L_Rep={last.L_rep:.4f}")
    return result


def _prompt_ids(text, ids_json):
    if ids_json is not None:
        ids = json.loads(ids_json)
        if not isinstance(ids, list) or not all(isinstance(i, int) for i in ids):
            raise RunConfigError("--prompt-ids must be a JSON list of integers")
        return ids
    return tokenize(text or "")


def cmd_generate(cfg: RunConfig, prompt=None, prompt_ids=None):
    ckpt = _checkpoint_path(cfg)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    g = cfg.generate
    params = None if g.disable_compression else _params(cfg)
    state = GeneratorState(model, params, position_type=cfg.loma.position_type, max_len=g.max_len)
    trace = generate(state, _prompt_ids(prompt, prompt_ids), eos_id=g.eos)
    out = Path(cfg.paths.out)
    cfg.snapshot(out)
    (out / "trace.json").write_text(json.dumps(trace.to_json(), indent=1) + "\n")
    text = detokenize(trace.tokens).decode("utf-8", errors="replace")
    print(text)
    return trace


def cmd_mask_dump(t: int, c: int, n_chunks: int, out_dir):
    try:
        p = LomaParams(c=c, t=t)
    except ValueError as exc:
        raise GeometryError(str(exc)) from exc
    if n_chunks < 1:
        raise GeometryError("n_chunks must be >= 1")
    mask = build_sample_mask(p, n_chunks)
    zones, _ = zone_layout(p, n_chunks)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"mask_t{t}_c{c}_n{n_chunks}"
    (out / f"{stem}.csv").write_text(mask_to_csv(mask))
    (out / f"{stem}.rle").write_text(mask_to_rle(mask))
    (out / f"position_ids_t{t}_c{c}_n{n_chunks}.csv").write_text(
        position_ids_to_csv(build_position_ids(p, n_chunks), zones)
    )
    print(f"wrote {mask.shape[0]}x{mask.shape[1]} mask to {out}")
    return mask


def cmd_eval(cfg: RunConfig):
    p = _params(cfg)
    ckpt = _checkpoint_path(cfg)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    report = ev.eval_repetition(model, _corpus(cfg, eval_split=True), p, cfg.eval.max_chunks)
    out = Path(cfg.paths.out)
    cfg.snapshot(out)
    ev.write_accuracy_csv([(f"t={p.t},c={p.c}", report)], out / "accuracy.csv")
    (out / "accuracy.json").write_text(json.dumps(vars(report), indent=1) + "\n")
    print(f"zone_accuracy={report.zone_accuracy:.4f} token_accuracy={report.token_accuracy:.4f}")
    return report


def _int_list(s):
    return [int(x) for x in s.split(",") if x.strip()]


def cmd_perf(cfg: RunConfig):
    p = _params(cfg)
    out = Path(cfg.paths.out)
    cfg.snapshot(out)
    kind = cfg.perf.cost_model
    if kind == "measured":
        ckpt = _checkpoint_path(cfg)
        model = load_checkpoint(ckpt) if ckpt.exists() else init_model(cfg.model)
        lengths = sorted(set(_int_list(cfg.perf.lengths)) | {1, p.read_len})
        table = ev.measure_latency(model, lengths, _int_list(cfg.perf.cache_lengths), cfg.perf.repeats)
        ev.write_latency_csv(table, out / "latency.csv")
        cm = ev.TableCost(table)
    elif kind == "constant":
        cm = ev.FunctionCost(lambda l, k: 1.0)
    elif kind == "linear":
        cm = ev.FunctionCost(lambda l, k: float(k) if l == 1 else float(l * (k + l)))
    else:
        raise RunConfigError(f"unknown perf.cost_model {kind!r}")
    rows = [ev.predict_costs(cm, p, m) for m in range(1, cfg.perf.m_max + 1)]
    ev.write_cost_csv(rows, out / "costs.csv")
    cross = ev.crossover_chunks(cm, p, cfg.perf.m_max)
    print(f"crossover_m={cross}")
    return rows


# -- argument parsing -------------------------------------------------------------
def _add_common(sp):
    sp.add_argument("--config", help="INI run config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--t", type=int)
    sp.add_argument("--c", type=int)
    sp.add_argument("--s-hat", type=int, dest="s_hat")
    sp.add_argument("--position-type", choices=["intermittent", "sequential"])
    sp.add_argument("--disable-compression", action="store_true")
    sp.add_argument("--out")
    sp.add_argument("--checkpoint")
    sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config key")


def build_parser():
    ap = argparse.ArgumentParser(prog="loma", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "perf"):
        _add_common(sub.add_parser(name))
    g = sub.add_parser("generate")
    _add_common(g)
    g.add_argument("--prompt", help="prompt text")
    g.add_argument("--prompt-ids", help="prompt as a JSON list of token ids")
    g.add_argument("--max-len", type=int)
    m = sub.add_parser("mask-dump")
    m.add_argument("t", type=int)
    m.add_argument("c", type=int)
    m.add_argument("n_chunks", type=int)
    m.add_argument("--out", default=".")
    return ap


def _overrides(args) -> dict:
    o = {}
    for key, dotted in (
        ("t", "loma.t"),
        ("c", "loma.c"),
        ("s_hat", "train.s_hat"),
        ("position_type", "loma.position_type"),
        ("out", "paths.out"),
        ("checkpoint", "paths.checkpoint"),
        ("seed", "run.seed"),
        ("max_len", "generate.max_len"),
    ):
        v = getattr(args, key, None)
        if v is not None:
            o[dotted] = v
    if getattr(args, "disable_compression", False):
        o["generate.disable_compression"] = "true"
    for item in args.set:
        k, sep, v = item.partition("=")
        if not sep:
            raise RunConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        o[k.strip()] = v.strip()
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "mask-dump":
            cmd_mask_dump(args.t, args.c, args.n_chunks, args.out)
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        if cfg.model.vocab_size != VOCAB.size:
            raise RunConfigError(f"model.vocab_size must be {VOCAB.size} for the byte vocabulary")
        if args.command == "train":
            p = _params(cfg)
            plan_lengths(min(cfg.data.doc_len, max_doc_len(p.t, p.c, cfg.train.s_hat)), p.t, p.c, cfg.train.s_hat)
            cmd_train(cfg)
        elif args.command == "generate":
            cmd_generate(cfg, args.prompt, args.prompt_ids)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "perf":
            cmd_perf(cfg)
    except (RunConfigError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeometryError, LengthPlanError) as exc:
        print(f"constraint violated: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
