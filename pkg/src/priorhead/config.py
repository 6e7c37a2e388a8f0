"""``key = value`` config files (INI sections) mapped onto the config dataclasses.

Sections: ``[train]`` -> TrainConfig, ``[net]`` -> NetConfig, ``[prior]`` with
``backend``, ``seed``, ``cache_file``, ``resolution``.  Every problem in a file
is collected and reported in one error.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from types import SimpleNamespace
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .networks import NetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class PriorConfig:
    backend: Optional[str] = "synthetic"
    seed: int = 0
    resolution: int = 64
    cache_file: Optional[str] = None


@dataclass
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)


def _convert(raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.strip().lower() in ("", "none"):
            return None
        return _convert(raw, next(a for a in args if a is not type(None)))
    if origin in (tuple, typing.Tuple):
        return tuple(_convert(tok, args[0]) for tok in raw.replace(",", " ").split())
    if tp is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw.strip()


def _build(cls, items: Dict[str, str], section: str, problems: List[str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in names:
            problems.append(f"[{section}] unknown key {key!r}")
            continue
        try:
            kwargs[key] = _convert(raw, hints[key])
        except ValueError as exc:
            problems.append(f"[{section}] {key}: {exc}")
    return kwargs


def parse_config(text: str, source: str = "<string>") -> Config:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([str(exc)]) from exc
    problems: List[str] = []
    known = {"train": TrainConfig, "net": NetConfig, "prior": PriorConfig}
    for sec in cp.sections():
        if sec not in known:
            problems.append(f"unknown section [{sec}]")
    built = {sec: _build(cls, dict(cp.items(sec)) if cp.has_section(sec) else {}, sec, problems)
             for sec, cls in known.items()}
    # semantic checks of the training section, all at once
    merged = SimpleNamespace(**{**dataclasses.asdict(TrainConfig()), **built["train"]})
    problems.extend(f"[train] {p}" for p in TrainConfig.problems(merged))
    if built["prior"].get("backend", "synthetic") not in (None, "synthetic", "external"):
        problems.append(f"[prior] backend must be synthetic or external, got {built['prior']['backend']!r}")
    objs = {}
    for sec in ("net", "prior"):
        try:
            objs[sec] = known[sec](**built[sec])
        except (TypeError, ValueError) as exc:
            problems.append(f"[{sec}] {exc}")
    if problems:
        raise ConfigError(problems)
    return Config(TrainConfig(**built["train"]), objs["net"], objs["prior"])


def load_config(path) -> Config:
    with open(path) as f:
        return parse_config(f.read(), str(path))


def dump_config(cfg: Config) -> str:
    lines = []
    for sec, obj in (("train", cfg.train), ("net", cfg.net), ("prior", cfg.prior)):
        lines.append(f"[{sec}]")
        for k, v in dataclasses.asdict(obj).items():
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            lines.append(f"{k} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
