"""Sectioned ``key = value`` run configuration.

Sections mirror the typed configs: ``[data]`` (synthetic generator and niche
size), ``[model]``, ``[abfn]``, ``[objective]``, ``[train]`` and ``[eval]``.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, is_dataclass, replace

from .data import SyntheticConfig
from .encoders import ModelConfig
from .errors import ConfigError
from .fusion import AbfnConfig
from .objectives import ObjectiveConfig


@dataclass
class DataConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    niche_k: int = 3


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr_peak: float = 5e-4
    warmup_fraction: float = 0.1
    lr_floor: float = 0.0
    wd_start: float = 0.04
    wd_end: float = 0.4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    use_abfn: bool = True
    use_ae: bool = True
    use_lns: bool = True

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.wd_start > self.wd_end:
            raise ConfigError(f"wd_start ({self.wd_start}) must not exceed wd_end ({self.wd_end})")
        if self.lr_peak < 0 or self.lr_floor < 0:
            raise ConfigError("learning rates must be non-negative")


@dataclass
class EvalConfig:
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 300
    train_fraction: float = 0.8
    split_seed: int = 0
    head_hidden: int = 64
    head_epochs: int = 300
    head_lr: float = 1e-2
    head_weight_decay: float = 1e-4
    target_genes: tuple[str, ...] = ()
    retrieval_batches: int = 20


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    abfn: AbfnConfig = field(default_factory=AbfnConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.data.synthetic.validate()
        if self.data.niche_k < 1:
            raise ConfigError("niche_k must be >= 1")
        self.model.validate()
        self.abfn.validate(self.model.embed_dim)
        self.objective.validate()
        self.train.validate()


SECTIONS = ("data", "model", "abfn", "objective", "train", "eval")


def _flat_fields(section_obj) -> dict[str, object]:
    """Field name -> value; ``[data]`` flattens its nested synthetic config."""
    out = {}
    for f in fields(section_obj):
        value = getattr(section_obj, f.name)
        if is_dataclass(value):
            out.update(_flat_fields(value))
        else:
            out[f.name] = value
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            if key == "img_channels":
                return tuple(int(t) for t in items)
            return tuple(items)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def to_text(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in _flat_fields(getattr(cfg, section)).items():
            lines.append(f"{key} = {_format(value)}")
        lines.append("")
    return "\n".join(lines)


def _apply(section_obj, values: dict[str, str], section: str):
    updates = {}
    nested = {}
    known = set()
    for f in fields(section_obj):
        current = getattr(section_obj, f.name)
        if is_dataclass(current):
            sub_keys = {g.name for g in fields(current)}
            known |= sub_keys
            sub_values = {k: v for k, v in values.items() if k in sub_keys}
            nested[f.name] = _apply(current, sub_values, section)
        else:
            known.add(f.name)
            if f.name in values:
                updates[f.name] = _parse(values[f.name], current, f.name)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section [{section}]")
    return replace(section_obj, **updates, **nested)


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base or RunConfig()
    updates = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        updates[section] = _apply(getattr(cfg, section), dict(parser.items(section)), section)
    return replace(cfg, **updates)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return from_text(fh.read())


def describe_defaults() -> str:
    """Every key with its default, for ``--help``."""
    return to_text(RunConfig())
