"""Flat ``key = value`` run configuration; '#' starts a comment."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


@dataclass
class RunConfig:
    data_dir: str
    out_dir: str
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    warmup_epochs: int = 2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    temperature: float = 30.0
    n_support: int = 3
    B: float = 2.0
    bias: float = 0.0
    seed: int = 0
    channels: tuple = (16, 32, 64)
    latent_dim: int = 128

    def __post_init__(self):
        if not self.data_dir or not self.out_dir:
            raise ConfigError("data_dir and out_dir must be non-empty")
        if not self.channels or any(c <= 0 for c in self.channels) or self.latent_dim <= 0:
            raise ConfigError("channels and latent_dim must be positive")
        try:
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TUPLE_TYPES = {"betas": float, "channels": int}


def _convert(key: str, raw: str, lineno: int):
    f = _FIELDS[key]
    try:
        if key in _TUPLE_TYPES:
            return tuple(_TUPLE_TYPES[key](v) for v in raw.split(","))
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {key} = {raw!r} as {f.type}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, lineno)
    missing = [k for k in ("data_dir", "out_dir") if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key(s) {', '.join(missing)}")
    return RunConfig(**values)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, path)


def format_config(cfg: RunConfig, keys: Optional[list] = None) -> str:
    out = []
    for k in keys or list(_FIELDS):
        v = getattr(cfg, k)
        out.append(f"{k} = {','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
    return "\n".join(out) + "\n"
