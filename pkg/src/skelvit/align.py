"""Feature alignment against a frozen skeleton encoder. Train-time only.

Targets come from a frozen provider as a (T_s, J, d_s) tensor and are pooled
globally (over time and joints) or locally (over joints only). Tapped visual
tokens are pooled the same way with the class token dropped, projected to the
skeleton width, and matched with mean-squared error; an optional classifier
on the projected features adds a cross-entropy term.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn

from .backbone import CHECKPOINT_DTYPE, PatchConfig, classification_loss
from .data import Skeleton3DSequence
from .errors import ConfigError, ContractError, NumericError
from .map_head import build_projection

FEATURE_CACHE_FORMAT = "skelvit.featcache/1"
_CACHE_MAGIC = b"SVFC"

LEVELS = ("global", "local", "both")


@dataclass(frozen=True)
class SkeletonFeatures:
    """Per-frame, per-joint features from a skeleton model: (T_s, J, d_s)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1:
            raise ContractError(f"features must be (T_s, J, d_s), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError("non-finite skeleton features")
        object.__setattr__(self, "values", v)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[2]


@runtime_checkable
class SkeletonFeatureProvider(Protocol):
    """A frozen source of skeleton features.

    Implementations must be deterministic (equal inputs give identical
    outputs) and gradient-free; `time_policy` documents how T_s relates to
    the input frame count ("same" keeps it).
    """

    name: str
    feature_dim: int
    time_policy: str

    def produce(self, pose3d: Skeleton3DSequence) -> SkeletonFeatures: ...


@dataclass(frozen=True)
class AlignConfig:
    """Placement and behavior of one feature-alignment head."""

    tap_layer: int = -1  # -1 means the deepest layer
    level: str = "global"
    with_classifier: bool = True
    head_kind: str = "fc"
    mse_inner: str = "mean"  # inner reduction over the feature axis

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown alignment level {self.level!r}")
        if self.mse_inner not in ("mean", "sum"):
            raise ConfigError(f"unknown mse_inner {self.mse_inner!r}")

    def resolve_tap(self, depth: int) -> int:
        tap = depth if self.tap_layer == -1 else self.tap_layer
        if not 1 <= tap <= depth:
            raise ConfigError(f"tap layer {tap} outside [1, {depth}]")
        return tap


def pool_skeleton_features(feats, level: str):
    """Global -> (d_s,) mean over frames and joints; local -> (T_s, d_s)."""
    values = feats.values if isinstance(feats, SkeletonFeatures) else np.asarray(feats)
    if level == "global":
        return values.mean(axis=(0, 1))
    if level == "local":
        return values.mean(axis=1)
    raise ConfigError(f"unknown alignment level {level!r}")


def pool_tokens(tokens: torch.Tensor, level: str, cfg: PatchConfig) -> torch.Tensor:
    """Pool tapped tokens, class token dropped.

    Accepts (rows, d) or (B, rows, d); global pools over all patch tokens to
    (B, d), local pools each frame's spatial tokens to (B, T_v, d).
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[1] != cfg.token_rows:
        raise ContractError(
            f"expected {cfg.token_rows} token rows, got {tokens.shape[1]}"
        )
    patches = tokens[:, 1:].reshape(-1, cfg.time_tokens, cfg.space_tokens,
                                    tokens.shape[-1])
    if level == "global":
        pooled = patches.mean(dim=(1, 2))
    elif level == "local":
        pooled = patches.mean(dim=2)
    else:
        raise ConfigError(f"unknown alignment level {level!r}")
    return pooled[0] if squeeze else pooled


def match_time(local_feats: np.ndarray, target_frames: int) -> np.ndarray:
    """Reconcile a (T_s, d) local target to T_v rows.

    Longer targets are uniformly subsampled (floor rule); shorter ones repeat
    the final row; equal lengths pass through unchanged.
    """
    local_feats = np.asarray(local_feats)
    t_s = local_feats.shape[0]
    if target_frames < 1 or t_s < 1:
        raise ConfigError("frame counts must be >= 1")
    if t_s == target_frames:
        return local_feats
    if t_s > target_frames:
        idx = (np.arange(target_frames) * t_s) // target_frames
        return local_feats[idx]
    pad = np.repeat(local_feats[-1:], target_frames - t_s, axis=0)
    return np.concatenate([local_feats, pad], axis=0)


class FeatureAlignHead(nn.Module):
    """Projection into the skeleton feature space plus optional classifier."""

    def __init__(self, patch_cfg: PatchConfig, feature_dim: int,
                 align_cfg: AlignConfig):
        super().__init__()
        align_cfg.resolve_tap(patch_cfg.depth)
        self.patch_cfg = patch_cfg
        self.align_cfg = align_cfg
        self.feature_dim = feature_dim
        self.projector = build_projection(align_cfg.head_kind,
                                          patch_cfg.embed_dim, feature_dim)
        self.classifier = (nn.Linear(feature_dim, patch_cfg.num_classes)
                           if align_cfg.with_classifier else None)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
        self.to(CHECKPOINT_DTYPE)

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        """f(pooled visual) -> predicted skeleton features, same trailing width."""
        if pooled.shape[-1] != self.patch_cfg.embed_dim:
            raise ContractError(
                f"pooled width {pooled.shape[-1]} != embed dim "
                f"{self.patch_cfg.embed_dim}"
            )
        flat = pooled.reshape(-1, 1, pooled.shape[-1])  # sequence axis for heads
        out = self.projector(flat).reshape(*pooled.shape[:-1], self.feature_dim)
        return out

    def class_logits(self, predicted: torch.Tensor) -> torch.Tensor:
        """Classifier on predicted features; local features are time-averaged."""
        if self.classifier is None:
            raise ConfigError("this head was built without a classifier")
        if predicted.ndim == 3:  # (B, T_v, d_s) local
            predicted = predicted.mean(dim=1)
        elif predicted.ndim == 1:
            predicted = predicted.unsqueeze(0)
        return self.classifier(predicted)


def alignment_loss(target: torch.Tensor, predicted: torch.Tensor,
                   level: str, mse_inner: str = "mean") -> torch.Tensor:
    """Squared-error alignment between pooled target and prediction.

    The feature axis uses `mse_inner` (mean by default); local alignment then
    averages its per-frame terms (the outer 1/T over time slots, global has a
    single slot). Batched inputs carry a leading batch axis and are averaged.
    """
    target = torch.as_tensor(target, dtype=predicted.dtype)
    if target.shape != predicted.shape:
        raise ContractError(
            f"target shape {tuple(target.shape)} != prediction "
            f"{tuple(predicted.shape)}"
        )
    if not torch.isfinite(predicted).all() or not torch.isfinite(target).all():
        raise NumericError("non-finite values in alignment loss")
    sq = (target - predicted) ** 2
    inner = sq.mean(dim=-1) if mse_inner == "mean" else sq.sum(dim=-1)
    return inner.mean()


def aux_loss_3d(target: torch.Tensor, predicted: torch.Tensor, labels,
                head: FeatureAlignHead) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, align, cls) loss triple; cls is 0 without a classifier."""
    cfg = head.align_cfg
    align = alignment_loss(target, predicted, cfg.level, cfg.mse_inner)
    if head.classifier is None:
        zero = torch.zeros((), dtype=predicted.dtype)
        return align, align, zero
    logits = head.class_logits(predicted)
    cls = classification_loss(logits, labels)
    return align + cls, align, cls


# ---------------------------------------------------------------------------
# Feature noise (robustness protocol) and dataset statistics.
# ---------------------------------------------------------------------------

def feature_channel_std(feature_list: list[SkeletonFeatures]) -> np.ndarray:
    """Per-channel standard deviation over every (sample, frame, joint) slot."""
    stacked = np.concatenate([f.values.reshape(-1, f.feature_dim)
                              for f in feature_list], axis=0)
    return stacked.std(axis=0)


def add_feature_noise(feats: SkeletonFeatures, level: float,
                      channel_std: np.ndarray, seed: int) -> SkeletonFeatures:
    """Add per-element uniform [0, level * sigma_c] noise, sigma per channel.

    Level 0 is a bit-exact no-op (the input object is returned).
    """
    if level < 0:
        raise ConfigError(f"noise level must be >= 0, got {level}")
    if level == 0:
        return feats
    channel_std = np.asarray(channel_std, dtype=np.float64)
    if channel_std.shape != (feats.feature_dim,):
        raise ContractError(
            f"channel std must have shape ({feats.feature_dim},), "
            f"got {channel_std.shape}"
        )
    rng = np.random.default_rng(seed)
    noise = rng.uniform(0.0, 1.0, size=feats.values.shape) * (level * channel_std)
    return SkeletonFeatures(feats.values + noise)


# ---------------------------------------------------------------------------
# Provider feature cache: header + raw little-endian float32 payload.
# ---------------------------------------------------------------------------

def write_feature_cache(path, feats: SkeletonFeatures, provider_name: str,
                        weight_hash: str) -> None:
    t_s, j, d_s = feats.values.shape
    name_b = provider_name.encode()
    hash_b = weight_hash.encode()
    header = _CACHE_MAGIC + struct.pack("<HIIIHH", 1, t_s, j, d_s,
                                        len(name_b), len(hash_b))
    payload = feats.values.astype("<f4").tobytes()
    Path(path).write_bytes(header + name_b + hash_b + payload)


def read_feature_cache(path) -> tuple[SkeletonFeatures, str, str]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CACHE_MAGIC:
        raise ContractError(f"{path}: not a feature cache file")
    version, t_s, j, d_s, name_len, hash_len = struct.unpack("<HIIIHH", raw[4:22])
    if version != 1:
        raise ContractError(f"{path}: unsupported feature cache version {version}")
    name = raw[22:22 + name_len].decode()
    weight_hash = raw[22 + name_len:22 + name_len + hash_len].decode()
    start = 22 + name_len + hash_len
    values = np.frombuffer(raw[start:], dtype="<f4", count=t_s * j * d_s)
    feats = SkeletonFeatures(values.astype(np.float64).reshape(t_s, j, d_s))
    return feats, name, weight_hash


def parameter_hash(module: nn.Module) -> str:
    """Stable digest of a module's parameters (used to tag feature caches)."""
    digest = hashlib.sha256()
    for name, param in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()[:16]
