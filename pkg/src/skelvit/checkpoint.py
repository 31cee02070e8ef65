"""Checkpoints: a flat dotted-name parameter map plus a config record.

Files carry a format tag; training checkpoints flag every non-backbone
parameter as train-only so stripping can drop them without knowing the head
layout.
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .backbone import PatchConfig, VideoTransformer
from .errors import ConfigError
from .trainer import TrainableModel, TrainConfig

CHECKPOINT_FORMAT = "skelvit.checkpoint/1"


def _train_cfg_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    for key in ("map_layers", "align_layers", "loss_weights"):
        if key in raw and raw[key] is not None:
            raw[key] = tuple(raw[key])
    return TrainConfig(**raw)


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    """Write a model (TrainableModel or plain VideoTransformer) to disk."""
    if isinstance(model, TrainableModel):
        record = {
            "kind": "trainable",
            "train": asdict(model.train_cfg),
            "num_joints": model.num_joints,
            "provider_dim": model.provider_dim,
        }
        patch_cfg = model.patch_cfg
        train_only = model.train_only_parameter_names()
    elif isinstance(model, VideoTransformer):
        record = {"kind": "backbone"}
        patch_cfg = model.cfg
        train_only = []
    else:
        raise ConfigError(f"cannot checkpoint a {type(model).__name__}")
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "patch_config": asdict(patch_cfg),
        "model": record,
        "params": model.state_dict(),
        "train_only": train_only,
        "meta": meta or {},
    }, path)


def load_payload(path) -> dict:
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(
            f"{path}: unsupported checkpoint format {payload.get('format')!r}"
        )
    return payload


def load_checkpoint(path):
    """Rebuild the checkpointed model; returns (model, meta)."""
    payload = load_payload(path)
    patch_cfg = PatchConfig(**payload["patch_config"])
    record = payload["model"]
    if record["kind"] == "backbone":
        model = VideoTransformer(patch_cfg)
    elif record["kind"] == "trainable":
        model = TrainableModel(patch_cfg, _train_cfg_from_dict(record["train"]),
                               num_joints=record["num_joints"],
                               provider_dim=record["provider_dim"])
    else:
        raise ConfigError(f"{path}: unknown model kind {record['kind']!r}")
    model.load_state_dict(payload["params"])
    return model, payload.get("meta", {})


def strip_checkpoint(in_path, out_path) -> None:
    """Drop every train-only key and rewrite as a plain backbone checkpoint."""
    payload = load_payload(in_path)
    train_only = set(payload.get("train_only", ()))
    params = {name.removeprefix("backbone."): tensor
              for name, tensor in payload["params"].items()
              if name not in train_only}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "patch_config": payload["patch_config"],
        "model": {"kind": "backbone"},
        "params": params,
        "train_only": [],
        "meta": payload.get("meta", {}),
    }, out_path)
