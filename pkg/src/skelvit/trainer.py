"""Training composition: backbone plus removable auxiliary heads.

The total objective is the classification loss plus the auxiliary map and
alignment losses; gradients from every term reach the backbone, which is the
whole point of the mechanism. Auxiliary parameters are flagged train-only
and stripping returns a plain backbone.

Traditional distillation baselines (feature or logit distillation into the
class token or an extra distillation token) replace the auxiliary losses for
comparison runs; their term is carried in the alignment slot of the bundle.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .align import (AlignConfig, FeatureAlignHead, SkeletonFeatureProvider,
                    add_feature_noise, alignment_loss, match_time,
                    pool_skeleton_features, pool_tokens)
from .backbone import (CHECKPOINT_DTYPE, PatchConfig, VideoTransformer,
                       classification_loss)
from .data import LabeledSample
from .errors import ConfigError, ContractError, DataError
from .jointmap import build_pixel_map, make_variant, pool_token_map
from .map_head import MapHeadConfig, TokenMapHead, token_map_loss

KD_BASELINES = ("none", "fd-class", "fd-distill", "ld-class", "ld-distill")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings and auxiliary-module placement."""

    epochs: int = 120
    batch_size: int = 16
    optimizer: str = "adam"  # "adam" or "sgd" (momentum SGD)
    lr: float = 3e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    cosine_decay: bool = True
    seed: int = 0
    map_layers: tuple[int, ...] = (1,)
    align_layers: tuple[int, ...] = (-1,)  # -1 resolves to the deepest layer
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    map_variant: str = "full"
    map_head_kind: str = "fc"
    map_reduction: str = "mean"
    align_level: str = "global"
    align_head_kind: str = "fc"
    with_classifier: bool = True
    mse_inner: str = "mean"
    kd_baseline: str = "none"
    workers: int = 1

    def __post_init__(self):
        if self.kd_baseline not in KD_BASELINES:
            raise ConfigError(f"unknown kd baseline {self.kd_baseline!r}; "
                              f"one of {KD_BASELINES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be three non-negative numbers")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, lr > 0 required")
        object.__setattr__(self, "map_layers", tuple(self.map_layers))
        object.__setattr__(self, "align_layers", tuple(self.align_layers))
        object.__setattr__(self, "loss_weights", tuple(float(w)
                                                       for w in self.loss_weights))

    def resolved_align_layers(self, depth: int) -> tuple[int, ...]:
        layers = tuple(depth if l == -1 else l for l in self.align_layers)
        bad = [l for l in layers + self.map_layers if not 1 <= l <= depth]
        if bad:
            raise ConfigError(f"placement layer(s) {bad} outside [1, {depth}]")
        return layers

    @property
    def uses_maps(self) -> bool:
        return self.kd_baseline == "none" and len(self.map_layers) > 0

    @property
    def uses_alignment(self) -> bool:
        return self.kd_baseline == "none" and len(self.align_layers) > 0

    @property
    def uses_provider(self) -> bool:
        return self.uses_alignment or self.kd_baseline != "none"


@dataclass
class LossBundle:
    """The loss decomposition logged at every step."""

    cls_loss: float
    map_loss: float
    align_loss: float
    aux_cls_loss: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FusionConfig:
    weight_rgb: float = 0.5
    weight_pose: float = 0.5
    combine: str = "softmax-average"

    def __post_init__(self):
        if self.weight_rgb < 0 or self.weight_pose < 0:
            raise ConfigError("fusion weights must be non-negative")
        if self.weight_rgb + self.weight_pose <= 0:
            raise ConfigError("fusion weights must not both be zero")
        if self.combine != "softmax-average":
            raise ConfigError(f"unknown fusion rule {self.combine!r}")


class TrainableModel(nn.Module):
    """Backbone plus train-only heads; the provider stays outside the module."""

    def __init__(self, patch_cfg: PatchConfig, train_cfg: TrainConfig,
                 num_joints: int | None = None,
                 provider_dim: int | None = None):
        super().__init__()
        self.patch_cfg = patch_cfg
        self.train_cfg = train_cfg
        self.num_joints = num_joints
        self.provider_dim = provider_dim
        self.backbone = VideoTransformer(patch_cfg)

        self.map_heads = nn.ModuleDict()
        if train_cfg.uses_maps:
            if num_joints is None:
                raise ConfigError("map heads need the joint count")
            for layer in train_cfg.map_layers:
                head_cfg = MapHeadConfig(tap_layer=layer,
                                         head_kind=train_cfg.map_head_kind,
                                         variant=train_cfg.map_variant)
                self.map_heads[str(layer)] = TokenMapHead(patch_cfg, num_joints,
                                                          head_cfg)

        self.align_heads = nn.ModuleDict()
        if train_cfg.uses_alignment:
            if provider_dim is None:
                raise ConfigError("alignment heads need the provider feature dim")
            for layer in train_cfg.resolved_align_layers(patch_cfg.depth):
                align_cfg = AlignConfig(tap_layer=layer,
                                        level=train_cfg.align_level,
                                        with_classifier=train_cfg.with_classifier,
                                        head_kind=train_cfg.align_head_kind,
                                        mse_inner=train_cfg.mse_inner)
                self.align_heads[str(layer)] = FeatureAlignHead(
                    patch_cfg, provider_dim, align_cfg)

        kd = train_cfg.kd_baseline
        self.kd_adapter = None
        self.distill_token = None
        self.distill_head = None
        if kd.startswith("fd"):
            if provider_dim is None:
                raise ConfigError("feature distillation needs the provider dim")
            self.kd_adapter = nn.Linear(patch_cfg.embed_dim, provider_dim)
        if kd.endswith("distill"):
            self.distill_token = nn.Parameter(
                torch.zeros(1, 1, patch_cfg.embed_dim, dtype=CHECKPOINT_DTYPE))
            nn.init.trunc_normal_(self.distill_token, std=0.02)
        if kd == "ld-distill":
            self.distill_head = nn.Linear(patch_cfg.embed_dim,
                                          patch_cfg.num_classes)
        for module in (self.kd_adapter, self.distill_head):
            if module is not None:
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
        self.to(CHECKPOINT_DTYPE)

    @property
    def token_rows(self) -> int:
        extra = 0 if self.distill_token is None else 1
        return self.patch_cfg.token_rows + extra

    def train_only_parameter_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters()
                if not name.startswith("backbone.")]

    def tap_layers(self) -> set[int]:
        taps = {int(l) for l in self.map_heads}
        taps |= {int(l) for l in self.align_heads}
        if self.train_cfg.kd_baseline != "none":
            taps.add(self.patch_cfg.depth)
        return taps


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def strip(model: TrainableModel) -> VideoTransformer:
    """Detach the inference model: backbone only, identical weights."""
    return copy.deepcopy(model.backbone)


# ---------------------------------------------------------------------------
# Target preparation (maps, pooled skeleton features, teacher logits).
# ---------------------------------------------------------------------------

@dataclass
class SampleTargets:
    """Precomputed per-sample training targets keyed by clip id."""

    map_bits: dict[str, np.ndarray] = field(default_factory=dict)
    map_depth: dict[str, np.ndarray] = field(default_factory=dict)
    align_global: dict[str, np.ndarray] = field(default_factory=dict)
    align_local: dict[str, np.ndarray] = field(default_factory=dict)
    teacher_logits: dict[str, np.ndarray] = field(default_factory=dict)

    def has(self, sample_id: str) -> bool:
        return (sample_id in self.map_bits or sample_id in self.align_global
                or sample_id in self.teacher_logits)


def build_map_target(sample: LabeledSample, patch_cfg: PatchConfig,
                     variant: str):
    """(bits, depth) token-map target for one sample."""
    if sample.pose2d is None:
        raise DataError(f"sample {sample.clip.id} has no 2D pose but the "
                        "map head is enabled")
    if variant == "depth" and sample.pose3d is None:
        raise DataError(f"sample {sample.clip.id} has no 3D pose but the "
                        "depth map variant is enabled")
    pixel = build_pixel_map(sample.pose2d, patch_cfg.height, patch_cfg.width)
    full = pool_token_map(pixel, patch_cfg)
    token_map = make_variant(full, variant, pose3d=sample.pose3d, cfg=patch_cfg)
    depth = token_map.depth if variant == "depth" else None
    return token_map.bits.astype(np.float64), depth


def prepare_targets(samples: list[LabeledSample], patch_cfg: PatchConfig,
                    cfg: TrainConfig,
                    provider: SkeletonFeatureProvider | None = None,
                    feature_noise: tuple[float, np.ndarray, int] | None = None,
                    ) -> SampleTargets:
    """Compute every target the configuration needs, once per sample.

    `feature_noise` optionally perturbs provider features before pooling:
    (level, per-channel std, seed), used by the robustness protocol.
    """
    targets = SampleTargets()
    if cfg.uses_provider and provider is None:
        raise ConfigError("this configuration needs a skeleton feature provider")
    needs_local = cfg.uses_alignment and cfg.align_level in ("local", "both")
    needs_global = (cfg.uses_alignment and cfg.align_level in ("global", "both")) \
        or cfg.kd_baseline.startswith("fd")
    for i, sample in enumerate(samples):
        sid = sample.clip.id
        if cfg.uses_maps:
            bits, depth = build_map_target(sample, patch_cfg, cfg.map_variant)
            targets.map_bits[sid] = bits
            if depth is not None:
                targets.map_depth[sid] = depth
        if cfg.uses_provider:
            if sample.pose3d is None:
                raise DataError(f"sample {sid} has no 3D pose but the "
                                "skeleton provider is required")
            feats = provider.produce(sample.pose3d)
            if feature_noise is not None:
                level, channel_std, seed = feature_noise
                feats = add_feature_noise(feats, level, channel_std, seed + i)
            if needs_global:
                targets.align_global[sid] = pool_skeleton_features(feats, "global")
            if needs_local:
                local = pool_skeleton_features(feats, "local")
                targets.align_local[sid] = match_time(local,
                                                      patch_cfg.time_tokens)
            if cfg.kd_baseline.startswith("ld"):
                targets.teacher_logits[sid] = provider.probe_logits(sample.pose3d)
    return targets


# ---------------------------------------------------------------------------
# Loss computation.
# ---------------------------------------------------------------------------

def _stack(samples, table, kind):
    try:
        return torch.as_tensor(
            np.stack([table[s.clip.id] for s in samples]), dtype=CHECKPOINT_DTYPE)
    except KeyError as exc:
        raise DataError(f"sample {exc.args[0]} is missing a prepared "
                        f"{kind} target") from exc


def _soft_cross_entropy(student_logits, teacher_logits):
    """-sum p_teacher * log softmax(student), temperature 1, batch mean."""
    teacher = F.softmax(teacher_logits, dim=-1)
    return -(teacher * F.log_softmax(student_logits, dim=-1)).sum(dim=-1).mean()


def compute_losses(model: TrainableModel, samples: list[LabeledSample],
                   targets: SampleTargets,
                   store_attn: bool = False) -> tuple[torch.Tensor, LossBundle]:
    """Forward the composed model on a batch and assemble the loss bundle."""
    cfg = model.train_cfg
    patch_cfg = model.patch_cfg
    frames = torch.stack([torch.as_tensor(s.clip.frames, dtype=CHECKPOINT_DTYPE)
                          for s in samples])
    labels = torch.tensor([s.clip.label for s in samples])
    logits, taps = model.backbone(frames, model.tap_layers(),
                                  extra_tokens=model.distill_token,
                                  store_attn=store_attn)
    cls_loss = classification_loss(logits, labels)

    zero = torch.zeros((), dtype=CHECKPOINT_DTYPE)
    map_loss = zero
    align_loss = zero
    aux_cls_loss = zero

    if cfg.kd_baseline != "none":
        kd_tokens = taps[patch_cfg.depth]
        if cfg.kd_baseline == "fd-class":
            token = kd_tokens[:, 0]
        elif cfg.kd_baseline == "fd-distill":
            token = kd_tokens[:, 1]
        if cfg.kd_baseline.startswith("fd"):
            target = _stack(samples, targets.align_global, "feature")
            align_loss = alignment_loss(target, model.kd_adapter(token),
                                        "global", cfg.mse_inner)
        else:
            teacher = _stack(samples, targets.teacher_logits, "teacher-logit")
            if cfg.kd_baseline == "ld-class":
                student = logits
            else:
                student = model.distill_head(kd_tokens[:, 1])
            align_loss = _soft_cross_entropy(student, teacher)
    else:
        for layer_key, head in model.map_heads.items():
            tap = taps[int(layer_key)]
            pred, depth_pred = head(tap)
            bits = _stack(samples, targets.map_bits, "map")
            depth_target = (_stack(samples, targets.map_depth, "depth")
                            if cfg.map_variant == "depth" else None)
            map_loss = map_loss + token_map_loss(
                pred, bits, reduction=cfg.map_reduction,
                depth_pred=depth_pred, depth_target=depth_target)
        for layer_key, head in model.align_heads.items():
            tap = taps[int(layer_key)]
            levels = (("global", "local") if cfg.align_level == "both"
                      else (cfg.align_level,))
            predicted_for_cls = None
            for level in levels:
                pooled = pool_tokens(tap, level, patch_cfg)
                predicted = head.project(pooled)
                table = (targets.align_global if level == "global"
                         else targets.align_local)
                target = _stack(samples, table, f"{level}-alignment")
                align_loss = align_loss + alignment_loss(target, predicted,
                                                         level, cfg.mse_inner)
                if predicted_for_cls is None:
                    predicted_for_cls = predicted
            if head.classifier is not None:
                aux_cls_loss = aux_cls_loss + classification_loss(
                    head.class_logits(predicted_for_cls), labels)

    w_cls, w_map, w_align = cfg.loss_weights
    total = w_cls * cls_loss + w_map * map_loss + w_align * (align_loss
                                                             + aux_cls_loss)
    bundle = LossBundle(
        cls_loss=float(cls_loss.detach()), map_loss=float(map_loss.detach()),
        align_loss=float(align_loss.detach()),
        aux_cls_loss=float(aux_cls_loss.detach()),
        total=float(total.detach()),
    )
    return total, bundle


def run_kd_baseline(model: TrainableModel, samples: list[LabeledSample],
                    targets: SampleTargets) -> LossBundle:
    """Loss bundle for a distillation-baseline configuration (no step taken)."""
    if model.train_cfg.kd_baseline == "none":
        raise ConfigError("model was not built with a kd baseline")
    with torch.no_grad():
        _, bundle = compute_losses(model, samples, targets)
    return bundle


def train_step(model: TrainableModel, optimizer: torch.optim.Optimizer,
               samples: list[LabeledSample], targets: SampleTargets | None = None,
               provider: SkeletonFeatureProvider | None = None) -> LossBundle:
    """One optimizer step on the weighted loss sum over a batch."""
    if targets is None:
        targets = prepare_targets(samples, model.patch_cfg, model.train_cfg,
                                  provider)
    optimizer.zero_grad()
    total, bundle = compute_losses(model, samples, targets)
    total.backward()
    optimizer.step()
    return bundle


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

def build_model(patch_cfg: PatchConfig, cfg: TrainConfig,
                num_joints: int | None = None,
                provider_dim: int | None = None) -> TrainableModel:
    """Seeded model construction; equal seeds give identical weights."""
    torch.manual_seed(cfg.seed)
    return TrainableModel(patch_cfg, cfg, num_joints=num_joints,
                          provider_dim=provider_dim)


def train(model: TrainableModel, samples: list[LabeledSample],
          provider: SkeletonFeatureProvider | None = None,
          log_path=None, targets: SampleTargets | None = None,
          ) -> list[LossBundle]:
    """Full training run; returns the per-step loss history.

    Deterministic for a fixed config, seed, and dataset in single-worker
    mode; the provider is never updated.
    """
    cfg = model.train_cfg
    torch.set_num_threads(max(1, cfg.workers))
    torch.manual_seed(cfg.seed)
    if targets is None:
        targets = prepare_targets(samples, model.patch_cfg, cfg, provider)
    if cfg.optimizer == "sgd":
        optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr,
                                    momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay)
    else:
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                     weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    history: list[LossBundle] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(samples))
            for start in range(0, len(samples), cfg.batch_size):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                if cfg.cosine_decay:
                    lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
                    for group in optimizer.param_groups:
                        group["lr"] = lr
                else:
                    lr = cfg.lr
                bundle = train_step(model, optimizer, batch, targets)
                history.append(bundle)
                if log_file:
                    record = {"step": step, "epoch": epoch, "lr": lr,
                              **bundle.as_dict()}
                    log_file.write(json.dumps(record) + "\n")
                step += 1
    finally:
        if log_file:
            log_file.close()
    return history


def eval_align_loss(model: TrainableModel, samples: list[LabeledSample],
                    provider: SkeletonFeatureProvider) -> float:
    """Mean alignment loss over samples with the current heads (no grads)."""
    if not model.align_heads:
        raise ConfigError("model has no alignment heads")
    targets = prepare_targets(samples, model.patch_cfg, model.train_cfg, provider)
    with torch.no_grad():
        _, bundle = compute_losses(model, samples, targets)
    return bundle.align_loss


# ---------------------------------------------------------------------------
# Late fusion.
# ---------------------------------------------------------------------------

def late_fuse(rgb_logits, pose_logits,
              fusion: FusionConfig = FusionConfig()) -> np.ndarray:
    """Weighted average of the two softmax distributions, renormalized."""
    rgb = np.asarray(rgb_logits, dtype=np.float64)
    pose = np.asarray(pose_logits, dtype=np.float64)
    if rgb.shape != pose.shape:
        raise ContractError(f"class counts differ: {rgb.shape} vs {pose.shape}")

    def softmax(x):
        x = x - x.max(axis=-1, keepdims=True)
        e = np.exp(x)
        return e / e.sum(axis=-1, keepdims=True)

    mixed = fusion.weight_rgb * softmax(rgb) + fusion.weight_pose * softmax(pose)
    return mixed / mixed.sum(axis=-1, keepdims=True)
