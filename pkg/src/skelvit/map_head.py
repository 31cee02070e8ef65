"""Auxiliary head that predicts the token-level joint map from tapped tokens.

Train-time only: a projection f (FC by default, MLP or small transformer
encoder as ablation options) followed by an affine joint-classification
layer. The class token row is excluded before projection, so predictions
align one-to-one with the (T_v, S_v, J) token map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import CHECKPOINT_DTYPE, PatchConfig, TokenTensor
from .errors import ConfigError, ContractError, NumericError
from .jointmap import TokenJointMap

HEAD_KINDS = ("fc", "mlp", "transformer")


@dataclass(frozen=True)
class MapHeadConfig:
    """Placement and shape of one token-map head."""

    tap_layer: int = 1
    proj_dim: int | None = None  # defaults to the backbone embed dim
    head_kind: str = "fc"
    variant: str = "full"  # full | flat | depth

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head_kind!r}")
        if self.variant not in ("full", "flat", "depth"):
            raise ConfigError(f"unknown map variant {self.variant!r}")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ConfigError("proj_dim must be >= 1")


class _EncoderLayer(nn.Module):
    """Pre-norm self-attention + MLP layer used by the transformer head kind."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        from .backbone import MultiHeadAttention  # avoid import cycle at load

        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads if dim % heads == 0 else 1)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * 2)
        self.fc2 = nn.Linear(dim * 2, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def build_projection(kind: str, in_dim: int, out_dim: int) -> nn.Module:
    """The parameterized module in front of a prediction head."""
    if kind == "fc":
        return nn.Linear(in_dim, out_dim)
    if kind == "mlp":
        dims = [in_dim, out_dim, out_dim, out_dim, out_dim]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        return nn.Sequential(*layers[:-1])  # 4 linear layers, GELU between
    if kind == "transformer":
        return nn.Sequential(_EncoderLayer(in_dim), _EncoderLayer(in_dim),
                             nn.Linear(in_dim, out_dim))
    raise ConfigError(f"unknown head kind {kind!r}")


class TokenMapHead(nn.Module):
    """f(tokens) -> per-token, per-joint presence logits (+ optional depth)."""

    def __init__(self, patch_cfg: PatchConfig, num_joints: int,
                 head_cfg: MapHeadConfig):
        super().__init__()
        if not 1 <= head_cfg.tap_layer <= patch_cfg.depth:
            raise ConfigError(
                f"tap layer {head_cfg.tap_layer} outside [1, {patch_cfg.depth}]"
            )
        self.patch_cfg = patch_cfg
        self.head_cfg = head_cfg
        self.num_joints = num_joints
        proj_dim = head_cfg.proj_dim or patch_cfg.embed_dim
        self.projection = build_projection(head_cfg.head_kind,
                                           patch_cfg.embed_dim, proj_dim)
        out_channels = 1 if head_cfg.variant == "flat" else num_joints
        self.classifier = nn.Linear(proj_dim, out_channels)
        self.depth_head = (nn.Linear(proj_dim, num_joints)
                           if head_cfg.variant == "depth" else None)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
        self.to(CHECKPOINT_DTYPE)

    @property
    def out_channels(self) -> int:
        return self.classifier.out_features

    def forward(self, tokens: torch.Tensor):
        """Tokens (B, rows, d) including the class token row, which is dropped.

        Returns logits (B, T_v, S_v, channels) and, for the depth variant,
        depth predictions (B, T_v, S_v, J); otherwise None.
        """
        cfg = self.patch_cfg
        if tokens.ndim != 3 or tokens.shape[1] != cfg.token_rows:
            raise ContractError(
                f"expected (B, {cfg.token_rows}, {cfg.embed_dim}) tokens, "
                f"got {tuple(tokens.shape)}"
            )
        feats = self.projection(tokens[:, 1:])
        logits = self.classifier(feats)
        shape = (-1, cfg.time_tokens, cfg.space_tokens, self.out_channels)
        depth = None
        if self.depth_head is not None:
            depth = self.depth_head(feats).reshape(
                -1, cfg.time_tokens, cfg.space_tokens, self.num_joints
            )
        return logits.reshape(shape), depth


def predict_token_map(z_l: TokenTensor, head: TokenMapHead) -> np.ndarray:
    """Single-sample prediction: (T_v, S_v, channels) presence logits."""
    tokens = torch.as_tensor(z_l.tokens, dtype=CHECKPOINT_DTYPE).unsqueeze(0)
    with torch.no_grad():
        logits, _ = head(tokens)
    return logits[0].numpy()


def token_map_loss(logits: torch.Tensor, targets: torch.Tensor,
                   reduction: str = "mean",
                   depth_pred: torch.Tensor | None = None,
                   depth_target: torch.Tensor | None = None) -> torch.Tensor:
    """Sigmoid BCE against the binary token map.

    The joint axis is always averaged (the per-token 1/J); `reduction`
    controls aggregation over tokens: "mean" (default) or "sum", in both
    cases followed by a mean over the batch. The depth variant adds a
    masked mean-squared error on depth where the map is 1, weighted 1.0.
    """
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    targets = torch.as_tensor(targets, dtype=logits.dtype)
    if targets.ndim == 3:
        targets = targets.unsqueeze(0)
    if targets.shape != logits.shape:
        raise ContractError(
            f"target shape {tuple(targets.shape)} != logits {tuple(logits.shape)}"
        )
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite map logits")
    per_elem = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    per_token = per_elem.mean(dim=-1)  # 1/J over joints
    per_sample = per_token.mean(dim=(1, 2)) if reduction == "mean" \
        else per_token.sum(dim=(1, 2))
    loss = per_sample.mean()
    if depth_pred is not None:
        if depth_target is None:
            raise ContractError("depth prediction given without depth targets")
        depth_target = torch.as_tensor(depth_target, dtype=logits.dtype)
        if depth_target.ndim == 3:
            depth_target = depth_target.unsqueeze(0)
        mask = targets if targets.shape == depth_target.shape else None
        if mask is None:
            raise ContractError("depth targets must match the full map shape")
        denom = mask.sum()
        if denom > 0:
            loss = loss + ((depth_pred - depth_target) ** 2 * mask).sum() / denom
    return loss
