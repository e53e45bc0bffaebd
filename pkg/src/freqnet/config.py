"""Flat ``section.key = value`` configuration files.

Dataclass fields map to keys; values are parsed by the field's default
type. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from fractions import Fraction
from pathlib import Path


class ConfigError(ValueError):
    pass


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, dict):
        return ";".join(f"{k}:{'+'.join(vals)}" for k, vals in sorted(v.items()))
    return str(v)


def parse_value(text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, Fraction):
            return Fraction(text)
        if isinstance(like, tuple):
            if not text:
                return ()
            first = like[0] if like else 0
            return tuple(parse_value(t, first) for t in text.split(","))
        if isinstance(like, dict):
            out = {}
            for part in filter(None, (p.strip() for p in text.split(";"))):
                k, _, vals = part.partition(":")
                out[int(k)] = tuple(v for v in vals.split("+") if v)
            return out
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {type(like).__name__}") from exc
    return text


def read_pairs(path) -> list:
    """Read ``section.key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or "." not in key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(obj, section: str, pairs):
    """Return a copy of dataclass ``obj`` with ``section.*`` pairs applied."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in pairs:
        sec, _, name = key.partition(".")
        if sec != section:
            continue
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        changes[name] = parse_value(value, getattr(obj, name))
    return dataclasses.replace(obj, **changes)


def to_lines(obj, section: str) -> list:
    return [f"{section}.{f.name} = {format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
