"""Flat ``section.key = value`` run configuration.

Example::

    # model shape
    model.n_channels = 1
    model.seq_len = 1500
    train.max_epochs = 30
    symbolic.lead = 0
    report.format = json
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

from .model import ModelConfig
from .train_eval import TrainConfig


class ConfigError(ValueError):
    """Unknown key, malformed line or ill-typed value."""


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lead: int = 0
    format: str = "json"
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lead < 0:
            raise ConfigError("symbolic.lead must be >= 0")
        if self.format not in ("json", "csv"):
            raise ConfigError(f"report.format must be json or csv, got {self.format!r}")


_PATH_KEYS = ("data", "checkpoint", "out", "history")


def _coerce(raw: str, kind, key: str):
    text = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def _field_types(cls) -> dict[str, str]:
    # annotations are strings under postponed evaluation
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        out[f.name] = t.split("|")[0].strip()
    return out


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply dotted ``key -> raw string`` pairs on top of ``base``."""
    base = base or RunConfig()
    model_types = _field_types(ModelConfig)
    train_types = _field_types(TrainConfig)
    model_kw, train_kw, top, paths = {}, {}, {}, dict(base.paths)
    for key, raw in pairs.items():
        section, _, name = key.partition(".")
        if section == "model" and name in model_types:
            model_kw[name] = _coerce(raw, model_types[name], key)
        elif section == "train" and name in train_types:
            train_kw[name] = _coerce(raw, train_types[name], key)
        elif key == "symbolic.lead":
            top["lead"] = _coerce(raw, int, key)
        elif key == "report.format":
            top["format"] = raw.strip()
        elif section == "paths" and name in _PATH_KEYS:
            paths[name] = raw.strip()
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        model = replace(base.model, **model_kw)
        train = replace(base.train, **train_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return dataclasses.replace(base, model=model, train=train, paths=paths, **top)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return parse_pairs(pairs, base)


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg)
    if overrides:
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            k, _, v = item.partition("=")
            pairs[k.strip()] = v
        cfg = parse_pairs(pairs, cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = [f"model.{k} = {v}" for k, v in cfg.model.to_dict().items()]
    lines += [f"train.{k} = {v}" for k, v in cfg.train.to_dict().items()]
    lines += [f"symbolic.lead = {cfg.lead}", f"report.format = {cfg.format}"]
    lines += [f"paths.{k} = {v}" for k, v in sorted(cfg.paths.items())]
    return "\n".join(lines) + "\n"
