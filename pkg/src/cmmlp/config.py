"""Flat ``key = value`` run configuration with model., data. and train. sections.

Example::

    # comments start with '#'
    model.widths = 8, 16, 32, 64, 128
    model.use_acre = false
    data.size = 128
    train.epochs = 200
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .network import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    size: int = 128
    split: tuple[int, int, int] = (7, 1, 2)
    split_seed: int = 0
    # evaluate on the training set instead of the validation split (overfit runs)
    eval_on_train: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(text: str, default: Any) -> Any:
    text = text.strip()
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.strip("()[]").split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return text


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _defaults(cls) -> dict[str, Any]:
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def parse_pairs(pairs: Iterable[tuple[str, str]], base: RunConfig | None = None,
                origin: str = "config") -> RunConfig:
    """Apply ``(dotted_key, text)`` pairs on top of ``base``; unknown keys are rejected."""
    base = base or RunConfig()
    updates: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, text in pairs:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{origin}: unknown key {key!r}; keys look like model.*, data.*, train.*")
        defaults = _defaults(SECTIONS[section])
        if name not in defaults:
            raise ConfigError(f"{origin}: unknown key {key!r}; known {section} keys: {sorted(defaults)}")
        try:
            updates[section][name] = _parse_value(text, defaults[name])
        except ValueError as exc:
            raise ConfigError(f"{origin}: bad value for {key}: {exc}") from exc
    try:
        return RunConfig(
            model=replace(base.model, **updates["model"]),
            data=replace(base.data, **updates["data"]),
            train=replace(base.train, **updates["train"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: {exc}") from exc


def parse_text(text: str, base: RunConfig | None = None, origin: str = "config") -> RunConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        pairs.append((key.strip(), value.strip()))
    return parse_pairs(pairs, base, origin)


def load(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, base, str(path))


def parse_overrides(items: Iterable[str], base: RunConfig) -> RunConfig:
    pairs = []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        pairs.append((key.strip(), value.strip()))
    return parse_pairs(pairs, base, "--set")


def dumps(config: RunConfig) -> str:
    """Fully resolved config; ``parse_text(dumps(c)) == c``."""
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save(config: RunConfig, path) -> None:
    Path(path).write_text(dumps(config))
