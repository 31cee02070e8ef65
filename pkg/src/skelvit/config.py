"""Nested run configuration: YAML/JSON documents plus dotted-path overrides."""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import yaml

from .backbone import PatchConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .trainer import FusionConfig, TrainConfig

SECTIONS = ("data", "model", "train", "fusion")


def load_config(path=None) -> dict:
    """Load a nested config document; missing path gives an empty document."""
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return doc


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply dotted-path overrides like train.lr=0.01; last writer wins."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if not keys or not all(keys):
            raise ConfigError(f"override {item!r} has an empty path component")
        value = yaml.safe_load(raw)
        node = doc
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[keys[-1]] = value
    return doc


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {sorted(unknown)}")
    coerced = {}
    for key, value in section.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return cls(**coerced)


def synthetic_spec(doc: dict, **defaults) -> SyntheticSpec:
    return _build(SyntheticSpec, {**defaults, **doc.get("data", {})}, "data")


def patch_config(doc: dict, **defaults) -> PatchConfig:
    return _build(PatchConfig, {**defaults, **doc.get("model", {})}, "model")


def train_config(doc: dict, **defaults) -> TrainConfig:
    return _build(TrainConfig, {**defaults, **doc.get("train", {})}, "train")


def fusion_config(doc: dict, **defaults) -> FusionConfig:
    return _build(FusionConfig, {**defaults, **doc.get("fusion", {})}, "fusion")
