"""Minimal video transformer with tap points on intermediate token tensors.

Blocks are pre-norm residual: tokens go through LN, then spatio-temporal
attention, and the result is added back; the MLP sub-layer follows the same
pattern. The default attention factorizes over time then space; a joint
full-attention variant is available via config.

Token layout is fixed: row 0 is the classification token, the remaining
rows are ordered time-major then row-major over the spatial grid. Optional
extra global tokens (used by distillation baselines) are inserted directly
after the classification token so all global rows stay contiguous.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import VideoClip
from .errors import ConfigError, ContractError, NumericError

CHECKPOINT_DTYPE = torch.float64


@dataclass(frozen=True)
class PatchConfig:
    """Geometry and width of the video transformer."""

    frames: int = 4
    height: int = 32
    width: int = 32
    patch_time: int = 1
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 4
    attention: str = "divided"  # "divided" (time then space) or "joint"
    mlp_ratio: float = 4.0
    final_norm: bool = True

    def __post_init__(self):
        for name in ("frames", "height", "width", "patch_time", "patch_size",
                     "embed_dim", "depth", "heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.attention not in ("divided", "joint"):
            raise ConfigError(f"unknown attention kind {self.attention!r}")

    @property
    def time_tokens(self) -> int:
        return math.ceil(self.frames / self.patch_time)

    @property
    def grid_rows(self) -> int:
        return math.ceil(self.height / self.patch_size)

    @property
    def grid_cols(self) -> int:
        return math.ceil(self.width / self.patch_size)

    @property
    def space_tokens(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_tokens(self) -> int:
        return self.time_tokens * self.space_tokens

    @property
    def token_rows(self) -> int:
        return 1 + self.patch_tokens

    @property
    def patch_dim(self) -> int:
        return self.patch_time * self.patch_size * self.patch_size * 3


@dataclass
class TokenTensor:
    """One sample's token tensor after layer `layer_index` (0 = embedding)."""

    tokens: np.ndarray  # (1 + T_v*S_v [+ extras], embed_dim)
    layer_index: int


@dataclass
class BackboneOutput:
    logits: np.ndarray  # (num_classes,)
    taps: dict[int, TokenTensor] = field(default_factory=dict)


class MultiHeadAttention(nn.Module):
    """Standard multi-head self-attention over the last-but-one axis."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.store_attn = False
        self.last_attn: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, heads, n, head_dim)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        if self.store_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm residual block; the attention sub-layer factorizes per config.

    Divided attention runs temporal attention on the patch tokens (each
    spatial site attends across time; global tokens pass through) and then
    spatial attention per frame, where every frame's sequence is the global
    tokens followed by that frame's patches. Global-token outputs from the
    spatial step are averaged over frames.
    """

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = Mlp(cfg.embed_dim, int(cfg.embed_dim * cfg.mlp_ratio))
        if cfg.attention == "divided":
            self.time_attn = MultiHeadAttention(cfg.embed_dim, cfg.heads)
            self.space_attn = MultiHeadAttention(cfg.embed_dim, cfg.heads)
        else:
            self.attn = MultiHeadAttention(cfg.embed_dim, cfg.heads)

    def _divided(self, x: torch.Tensor, num_global: int) -> torch.Tensor:
        cfg = self.cfg
        b, _, d = x.shape
        t_v, s_v = cfg.time_tokens, cfg.space_tokens
        glob = x[:, :num_global]                      # (b, g, d)
        patches = x[:, num_global:]                   # (b, t_v*s_v, d)

        seq = patches.reshape(b, t_v, s_v, d).permute(0, 2, 1, 3)
        seq = self.time_attn(seq.reshape(b * s_v, t_v, d))
        patches = seq.reshape(b, s_v, t_v, d).permute(0, 2, 1, 3)  # (b, t_v, s_v, d)

        glob_rep = glob[:, None, :, :].expand(b, t_v, num_global, d)
        seq = torch.cat([glob_rep, patches], dim=2).reshape(b * t_v, num_global + s_v, d)
        seq = self.space_attn(seq).reshape(b, t_v, num_global + s_v, d)
        glob_out = seq[:, :, :num_global].mean(dim=1)
        patch_out = seq[:, :, num_global:].reshape(b, t_v * s_v, d)
        return torch.cat([glob_out, patch_out], dim=1)

    def forward(self, x: torch.Tensor, num_global: int) -> torch.Tensor:
        y = self.norm1(x)
        if self.cfg.attention == "divided":
            y = self._divided(y, num_global)
        else:
            y = self.attn(y)
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x


class VideoTransformer(nn.Module):
    """Patch tokenizer + positional/class tokens + transformer blocks + head."""

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.token_rows, cfg.embed_dim))
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim) if cfg.final_norm else nn.Identity()
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self._init_weights()
        self.to(CHECKPOINT_DTYPE)

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.zeros_(self.pos_embed)

    # -- tokenization -------------------------------------------------------

    def patchify(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, 3) -> (B, T_v*S_v, patch_dim); partial patches zero-pad."""
        cfg = self.cfg
        b, t, h, w, _ = frames.shape
        if (t, h, w) != (cfg.frames, cfg.height, cfg.width):
            raise ContractError(
                f"clip shape {(t, h, w)} incompatible with config "
                f"{(cfg.frames, cfg.height, cfg.width)}"
            )
        pt = cfg.time_tokens * cfg.patch_time - t
        ph = cfg.grid_rows * cfg.patch_size - h
        pw = cfg.grid_cols * cfg.patch_size - w
        if pt or ph or pw:
            frames = F.pad(frames, (0, 0, 0, pw, 0, ph, 0, pt))
        frames = frames.reshape(
            b, cfg.time_tokens, cfg.patch_time,
            cfg.grid_rows, cfg.patch_size, cfg.grid_cols, cfg.patch_size, 3,
        )
        # order: time-major, then grid row-major
        frames = frames.permute(0, 1, 3, 5, 2, 4, 6, 7)
        return frames.reshape(b, cfg.patch_tokens, cfg.patch_dim)

    def embed(self, frames: torch.Tensor,
              extra_tokens: torch.Tensor | None = None) -> tuple[torch.Tensor, int]:
        """Tokenize a batch; returns (tokens, num_global).

        Extra tokens (e.g. a distillation token) are inserted after the class
        token and behave as global tokens in divided attention.
        """
        x = self.patch_embed(self.patchify(frames))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        num_global = 1
        if extra_tokens is not None:
            extras = extra_tokens.expand(x.shape[0], -1, -1)
            # keep globals contiguous at the front for the attention split
            x = torch.cat([x[:, :1], extras, x[:, 1:]], dim=1)
            num_global += extras.shape[1]
        return x, num_global

    # -- forward ------------------------------------------------------------

    def forward(self, frames: torch.Tensor, tap_layers=(),
                extra_tokens: torch.Tensor | None = None,
                store_attn: bool = False):
        """Run the backbone; returns (logits, taps dict layer -> token tensor).

        Tap layers are 1-based block indices; taps hold the post-block tokens.
        """
        cfg = self.cfg
        tap_layers = set(tap_layers)
        bad = tap_layers - set(range(1, cfg.depth + 1))
        if bad:
            raise ConfigError(f"unknown tap layer(s) {sorted(bad)}; depth is {cfg.depth}")
        for module in self.modules():
            if isinstance(module, MultiHeadAttention):
                module.store_attn = store_attn
        x, num_global = self.embed(frames, extra_tokens)
        taps: dict[int, torch.Tensor] = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, num_global)
            if i in tap_layers:
                taps[i] = x
        x = self.norm(x)
        logits = self.head(x[:, 0])
        return logits, taps

    def head_logits(self, tokens: torch.Tensor) -> torch.Tensor:
        """Apply final norm + classification head to arbitrary token rows."""
        return self.head(self.norm(tokens))

    # -- single-clip convenience API ----------------------------------------

    def _clip_tensor(self, clip: VideoClip) -> torch.Tensor:
        return torch.as_tensor(clip.frames, dtype=CHECKPOINT_DTYPE).unsqueeze(0)

    def tokenize(self, clip: VideoClip) -> TokenTensor:
        """Embedded tokens (positional + class token applied), layer index 0."""
        with torch.no_grad():
            tokens, _ = self.embed(self._clip_tensor(clip))
        return TokenTensor(tokens=tokens[0].numpy(), layer_index=0)

    def forward_with_taps(self, clip: VideoClip, tap_layers=()) -> BackboneOutput:
        with torch.no_grad():
            logits, taps = self.forward(self._clip_tensor(clip), tap_layers)
        return BackboneOutput(
            logits=logits[0].numpy(),
            taps={l: TokenTensor(tokens=t[0].numpy(), layer_index=l)
                  for l, t in taps.items()},
        )

    def predict_logits(self, clips: list[VideoClip],
                       batch_size: int = 32) -> np.ndarray:
        """Pose-free batched inference; returns (N, num_classes) logits."""
        out = []
        with torch.no_grad():
            for i in range(0, len(clips), batch_size):
                batch = torch.stack([
                    torch.as_tensor(c.frames, dtype=CHECKPOINT_DTYPE)
                    for c in clips[i:i + batch_size]
                ])
                logits, _ = self.forward(batch)
                out.append(logits.numpy())
        return np.concatenate(out, axis=0)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over softmax logits; mean over the batch."""
    logits = torch.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels).reshape(-1)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits passed to classification loss")
    if labels.max() >= logits.shape[-1] or labels.min() < 0:
        raise ContractError(
            f"label outside [0, {logits.shape[-1]}): {labels.tolist()}"
        )
    return F.cross_entropy(logits, labels)


def count_macs(cfg: PatchConfig, num_extra_tokens: int = 0) -> int:
    """Analytic multiply-accumulate count for one clip's forward pass.

    Counts matrix-multiply MACs only (projections, attention score/value
    products, MLP, head); normalization and softmax are excluded.
    """
    d = cfg.embed_dim
    t_v, s_v = cfg.time_tokens, cfg.space_tokens
    n_patch = t_v * s_v
    g = 1 + num_extra_tokens
    rows = g + n_patch
    hidden = int(d * cfg.mlp_ratio)

    total = n_patch * cfg.patch_dim * d  # patch embedding
    for _ in range(cfg.depth):
        if cfg.attention == "divided":
            # temporal: per spatial site, sequences of length t_v
            total += n_patch * 3 * d * d                  # qkv
            total += 2 * s_v * t_v * t_v * d              # scores + weighted values
            total += n_patch * d * d                      # out proj
            # spatial: per frame, sequences of globals + that frame's patches
            seq = g + s_v
            total += t_v * seq * 3 * d * d
            total += 2 * t_v * seq * seq * d
            total += t_v * seq * d * d
        else:
            total += rows * 3 * d * d
            total += 2 * rows * rows * d
            total += rows * d * d
        total += rows * 2 * d * hidden                    # MLP
    total += d * cfg.num_classes                          # classification head
    return total
