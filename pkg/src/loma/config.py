"""Run configuration: INI file with one section per module, plus overrides."""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class RunConfigError(ValueError):
    pass


@dataclass
class LomaSection:
    t: int = 4
    c: int = 2
    position_type: str = "intermittent"


@dataclass
class DataSection:
    corpus: str = "synthetic"  # or a manifest path
    split_lines: bool = False
    n_docs: int = 1_000_000
    doc_len: int = 24
    alphabet: int = 256
    seed: int = 1
    eval_docs: int = 64
    eval_seed: int = 2


@dataclass
class PathsSection:
    out: str = "runs/default"
    checkpoint: str = ""


@dataclass
class GenerateSection:
    max_len: int = 64
    eos: int | None = None
    disable_compression: bool = False


@dataclass
class EvalSection:
    max_chunks: int | None = None


@dataclass
class PerfSection:
    lengths: str = "1,16"
    cache_lengths: str = "0,64,128,256,512,1024"
    repeats: int = 7
    m_max: int = 32
    cost_model: str = "measured"  # measured | constant | linear


@dataclass
class RunConfig:
    seed: int = 0
    loma: LomaSection = field(default_factory=LomaSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    eval: EvalSection = field(default_factory=EvalSection)
    perf: PerfSection = field(default_factory=PerfSection)

    SECTIONS = ("loma", "model", "train", "data", "paths", "generate", "eval", "perf")

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one run seed into model init and batch sampling."""
        self.seed = seed
        self.model = dataclasses.replace(self.model, seed=seed)
        self.train = dataclasses.replace(self.train, seed=seed)
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        for name in self.SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def snapshot(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(self.to_ini())


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return str(v)


def _convert(raw: str, hint, key: str):
    args = typing.get_args(hint)
    if type(None) in args:
        if raw.strip().lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple or typing.get_origin(hint) is tuple:
            return tuple(float(x) for x in raw.split(","))
        return raw.strip()
    except ValueError as exc:
        raise RunConfigError(f"bad value for {key}: {raw!r}") from exc


def _build(cls, values: dict, section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise RunConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {k: _convert(v, hints[k], f"{section}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"[{section}] {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file (optional) and apply ``{"section.key": "value"}`` overrides."""
    raw: dict[str, dict[str, str]] = {name: {} for name in RunConfig.SECTIONS}
    raw["run"] = {}
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            if not cp.read(path):
                raise RunConfigError(f"cannot read config file {path}")
        except configparser.Error as exc:
            raise RunConfigError(str(exc)) from exc
        for sec in cp.sections():
            if sec not in raw:
                raise RunConfigError(f"unknown config section [{sec}]")
            raw[sec].update(cp[sec])
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if sec not in raw:
            raise RunConfigError(f"unknown override section {sec!r}")
        raw[sec][key] = str(value)

    classes = {
        "loma": LomaSection,
        "model": ModelConfig,
        "train": TrainConfig,
        "data": DataSection,
        "paths": PathsSection,
        "generate": GenerateSection,
        "eval": EvalSection,
        "perf": PerfSection,
    }
    built = {name: _build(cls, raw[name], name) for name, cls in classes.items()}
    cfg = RunConfig(**built)
    if "seed" in raw["run"]:
        cfg.with_seed(_convert(raw["run"]["seed"], int, "run.seed"))
    return cfg
