"""Flat key=value config files.

One ``section.field = value`` entry per line, ``#`` comments. Sections map
onto the dataclasses: ``train.*`` -> TrainingConfig, ``flow.*`` ->
FlowNetConfig, ``seg.*`` -> SegNetConfig, ``data.*`` -> SyntheticSpec.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .data_io import SyntheticSpec
from .flownet import FlowNetConfig
from .segmenter import SegNetConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    """Unparseable config file or unknown key."""


_SECTIONS = {
    "train": TrainingConfig,
    "flow": FlowNetConfig,
    "seg": SegNetConfig,
    "data": SyntheticSpec,
}


def parse_config_text(text, source="<config>"):
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"{source}:{lineno}: keys are section.field, got {key!r}")
        entries[key] = value
    return entries


def _coerce(value, annotation, key):
    if annotation in (float, "float"):
        return float(value)
    if annotation in (int, "int"):
        return int(value)
    if annotation in (bool, "bool"):
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if annotation in (tuple, "tuple"):
        return tuple(float(v) for v in value.split(","))
    if annotation in (str, "str"):
        return value
    raise ConfigError(f"{key}: unsupported field type {annotation!r}")


def build_configs(entries):
    """Instantiate all four config dataclasses from parsed entries."""
    kwargs = {name: {} for name in _SECTIONS}
    for key, value in entries.items():
        section, fname = key.split(".")
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if fname not in fields:
            raise ConfigError(f"unknown field {key!r} (section {section!r} has {sorted(fields)})")
        kwargs[section][fname] = _coerce(value, fields[fname].type, key)
    try:
        return {name: cls(**kwargs[name]) for name, cls in _SECTIONS.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_configs(path):
    text = Path(path).read_text()
    return build_configs(parse_config_text(text, source=str(path)))
