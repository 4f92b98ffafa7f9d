"""Run configuration: nested dataclasses, a YAML file, and dotted flag overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .training import AblationFlags, OptimConfig, ScheduleSpec


@dataclass
class DataConfig:
    n_terms: int = 16
    grid: list[int] = field(default_factory=lambda: [7, 7, 4])
    grammar_seed: int = 0
    max_len: int = 64


@dataclass
class SizesConfig:
    textbook_docs: int = 500
    train: int = 2000
    val: int = 200
    test: int = 200

    def as_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)


@dataclass
class TransferConfig:
    """Stage settings used when ``flags.transfer_learning`` is on (corpus A, then B)."""

    epochs_a: int = 30
    epochs_b: int = 30
    lr_a: float = 1e-3
    lr_b: float = 1e-3


@dataclass
class EvalConfig:
    decode: str = "greedy"
    beam_width: int = 4
    split: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    schedule: str = "1,3"
    epochs: int = 30
    early_stop_patience: int = 0
    train_corpus: str = "A"
    data: DataConfig = field(default_factory=DataConfig)
    sizes: SizesConfig = field(default_factory=SizesConfig)
    sizes_b: SizesConfig = field(default_factory=lambda: SizesConfig(textbook_docs=200, train=300, val=100, test=100))
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived views ---------------------------------------------------------------
    @property
    def schedule_mn(self) -> tuple[int, int]:
        return parse_schedule(self.schedule)

    def schedule_spec(self, epochs: int | None = None) -> ScheduleSpec:
        m, n = self.schedule_mn
        return ScheduleSpec(m, n, self.epochs if epochs is None else epochs, self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def validate(self) -> RunConfig:
        problems = []
        try:
            m, n = self.schedule_mn
        except ConfigError as exc:
            problems.append(str(exc))
            m = n = 0
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.train_corpus not in ("A", "B"):
            problems.append(f"train_corpus must be A or B, got {self.train_corpus!r}")
        if not self.flags.external_knowledge and m > 0:
            problems.append(
                f"flags.external_knowledge=false forbids pretraining passes but schedule is {m},{n}; "
                f"use --schedule 0,{n} or enable external knowledge"
            )
        if len(self.data.grid) != 3 or min(self.data.grid) < 1:
            problems.append(f"data.grid must be three positive integers, got {self.data.grid}")
        if self.data.n_terms < 1:
            problems.append("data.n_terms must be >= 1")
        h, w, _ = (self.data.grid + [1, 1, 1])[:3]
        if self.data.n_terms > 16:
            problems.append("data.n_terms above 16 exceeds the built-in terminology pool")
        if h < 3 or w < 3:
            problems.append("data.grid needs at least 3x3 cells for the quadrant layout")
        for label, sizes in (("sizes", self.sizes), ("sizes_b", self.sizes_b)):
            for k, v in sizes.as_dict().items():
                if v < 0:
                    problems.append(f"{label}.{k} must be >= 0")
        mc = self.model
        for name in ("d_model", "d_term", "d_visual", "d_text", "enc_heads", "dec_heads", "max_len", "max_context_len"):
            if getattr(mc, name) < 1:
                problems.append(f"model.{name} must be >= 1")
        if mc.enc_heads and mc.d_model % mc.enc_heads:
            problems.append(f"model.d_model={mc.d_model} is not divisible by model.enc_heads={mc.enc_heads}")
        if mc.dec_heads and mc.d_model % mc.dec_heads:
            problems.append(f"model.d_model={mc.d_model} is not divisible by model.dec_heads={mc.dec_heads}")
        if not 0 <= mc.dropout < 1:
            problems.append("model.dropout must be in [0, 1)")
        o = self.optim
        if o.lr <= 0 or o.patch_lr < 0:
            problems.append("optim.lr must be > 0 and optim.patch_lr >= 0")
        if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1):
            problems.append("optim.beta1 and optim.beta2 must lie in [0, 1)")
        if o.lam < 0:
            problems.append("optim.lam must be >= 0")
        if o.batch_size < 1:
            problems.append("optim.batch_size must be >= 1")
        if self.eval.decode not in ("greedy", "beam"):
            problems.append(f"eval.decode must be greedy or beam, got {self.eval.decode!r}")
        if self.eval.beam_width < 1:
            problems.append("eval.beam_width must be >= 1")
        if self.eval.split not in ("train", "val", "test"):
            problems.append(f"eval.split must be train, val or test, got {self.eval.split!r}")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self


def parse_schedule(text: str) -> tuple[int, int]:
    try:
        m, n = (int(x) for x in str(text).split(","))
    except ValueError:
        raise ConfigError(f"schedule must look like 'm,n' (e.g. 1,3), got {text!r}") from None
    if m < 0 or n < 0 or m + n < 1:
        raise ConfigError(f"schedule {m},{n} needs m, n >= 0 and m + n >= 1")
    return m, n


# -- flattening and overrides ---------------------------------------------------------

def _fields(cls) -> dict[str, tuple[Any, Any]]:
    hints = typing.get_type_hints(cls)
    return {f.name: (hints[f.name], f) for f in dataclasses.fields(cls)}


def flat_keys(cls=RunConfig, prefix: str = "") -> dict[str, Any]:
    """Dotted key -> leaf type for every configurable field."""
    out = {}
    for name, (tp, _) in _fields(cls).items():
        if dataclasses.is_dataclass(tp):
            out.update(flat_keys(tp, f"{prefix}{name}."))
        else:
            out[f"{prefix}{name}"] = tp
    return out


def coerce(key: str, tp, value):
    """Convert a flag string (or YAML scalar) to the field's type."""
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            if isinstance(value, bool):
                return value
            low = str(value).strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value)
        if origin is list:
            (inner,) = typing.get_args(tp)
            items = value if isinstance(value, (list, tuple)) else str(value).split(",")
            return [coerce(key, inner, v) for v in items]
    except (ValueError, TypeError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a mapping")
    fields = _fields(cls)
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp, _ = fields[name]
        key = prefix + name
        kwargs[name] = _build(tp, value, key + ".") if dataclasses.is_dataclass(tp) else coerce(key, tp, value)
    return cls(**kwargs)


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, overlaid by the YAML file, overlaid by dotted overrides; then validated."""
    data: dict = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        data = loaded or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    keys = flat_keys()
    for dotted, raw in (overrides or {}).items():
        if dotted not in keys:
            raise ConfigError(f"unknown configuration key {dotted!r}")
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = raw
    return _build(RunConfig, data).validate()
