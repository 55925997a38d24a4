"""Flat ``key = value`` configuration with dotted keys.

Keys map onto three dataclasses: ``data.*`` onto SyntheticSpec, ``schedule.*``
and ``dbscan.*`` onto the nested trainer policies, and bare keys onto
TrainConfig. ``seed`` drives both data generation and training.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .clustering import DbscanParams
from .data import SyntheticSpec
from .schedule import SchedulePolicy
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad key or value; the message names the offending key."""


_SECTIONS = {"data": SyntheticSpec, "schedule": SchedulePolicy, "dbscan": DbscanParams}
_NESTED = {"schedule", "dbscan"}


def _fields(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: (hints[f.name], f.default) for f in dataclasses.fields(cls)}


def defaults() -> dict[str, object]:
    out: dict[str, object] = {}
    for name, (_, default) in _fields(TrainConfig).items():
        if name not in _NESTED:
            out[name] = default
    for section, cls in _SECTIONS.items():
        for name, (_, default) in _fields(cls).items():
            if section == "data" and name == "seed":
                continue
            out[f"{section}.{name}"] = default
    return out


def _type_of(key: str):
    if "." in key:
        section, name = key.split(".", 1)
        return _fields(_SECTIONS[section])[name][0]
    return _fields(TrainConfig)[key][0]


def coerce(key: str, raw) -> object:
    """Parse ``raw`` (string or already-typed value) to the declared type of ``key``."""
    known = defaults()
    if key not in known:
        raise ConfigError(f"unknown config key {key!r}")
    tp = _type_of(key)
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    text = raw.strip()
    args = typing.get_args(tp)
    try:
        if type(None) in args:
            if text.lower() in ("none", "null", ""):
                return None
            tp = next(a for a in args if a is not type(None))
        if tp is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if typing.get_origin(tp) is tuple:
            return tuple(float(v) for v in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None


def read_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve(*layers: dict) -> dict[str, object]:
    """Merge layers over the defaults, later layers winning."""
    out = defaults()
    for layer in layers:
        for key, raw in layer.items():
            out[key] = coerce(key, raw)
    return out


def build(resolved: dict) -> tuple[SyntheticSpec, TrainConfig]:
    groups: dict[str, dict] = {s: {} for s in _SECTIONS}
    top = {}
    for key, value in resolved.items():
        if "." in key:
            section, name = key.split(".", 1)
            groups[section][name] = value
        else:
            top[key] = value
    try:
        spec = SyntheticSpec(seed=top["seed"], **groups["data"])
        cfg = TrainConfig(schedule=SchedulePolicy(**groups["schedule"]),
                          dbscan=DbscanParams(**groups["dbscan"]), **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec, cfg


def dump(resolved: dict) -> str:
    lines = []
    for key, value in resolved.items():
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
