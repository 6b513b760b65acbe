"""Flat ``section.key=value`` configuration text.

Used both for run configuration files and for the config block embedded in
checkpoints. Values are parsed back to the type of the dataclass field's
default; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

from .errors import ConfigError


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if value is None:
        return ""
    return str(value)


def _parse(text: str, like: Any, key: str) -> Any:
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            items = [t for t in text.split(",") if t.strip()]
            elem = like[0] if like else 0
            return tuple(_parse(t, elem, key) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def to_kv(obj, prefix: str) -> dict[str, str]:
    return {f"{prefix}.{f.name}": _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def from_kv(cls, values: dict[str, str], prefix: str, base=None):
    """Build ``cls`` from the ``prefix.*`` entries of ``values`` over ``base`` (or defaults)."""
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, text in values.items():
        section, _, name = key.partition(".")
        if section != prefix:
            continue
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        updates[name] = _parse(text, getattr(base, name), key)
    return dataclasses.replace(base, **updates)


def dumps(values: dict[str, str]) -> str:
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))


def loads(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_file(path) -> dict[str, str]:
    try:
        return loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
