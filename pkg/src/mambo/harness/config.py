"""Flat ``key = value`` experiment configuration files.

Keys are the field names of :class:`ExperimentConfig`.  Blank lines and
``#`` comments are ignored; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .runner import ExperimentConfig


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str, annotation):
    raw = raw.strip()
    optional = False
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        optional = len(args) < len(typing.get_args(annotation))
        annotation = args[0]
        origin = typing.get_origin(annotation)
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if origin is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if annotation is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None


def _field_types() -> dict:
    hints = typing.get_type_hints(ExperimentConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(ExperimentConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    types_ = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in types_:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, types_[key])
    return values


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read ``path`` (if given), apply ``overrides``, and validate."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values = parse_config_text(p.read_text(), str(p))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
