"""Reference frozen skeleton feature provider.

A small per-joint temporal encoder over raw 3D joint tracks. It is pretrained
once on a dataset's skeleton stream with an attached classification probe,
then weight-locked; the probe doubles as the teacher for logit-distillation
baselines and as the pose-side model for late fusion.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .align import SkeletonFeatures, parameter_hash
from .backbone import CHECKPOINT_DTYPE
from .data import LabeledSample, Skeleton3DSequence
from .errors import ConfigError, ContractError, DataError

PROVIDER_FORMAT = "skelvit.provider/1"


class TemporalJointEncoder(nn.Module):
    """Per-joint temporal encoder preserving the (T, J) axes.

    Each joint's coordinate track is embedded pointwise, tagged with a joint
    embedding, and mixed over time by two 1-D convolutions. The probe head
    mean-pools over frames and joints for classification.
    """

    def __init__(self, num_joints: int, num_classes: int, feature_dim: int = 32):
        super().__init__()
        if num_joints < 1 or num_classes < 1 or feature_dim < 1:
            raise ConfigError("num_joints, num_classes, feature_dim must be >= 1")
        self.num_joints = num_joints
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.point_embed = nn.Linear(3, feature_dim)
        self.input_norm = nn.LayerNorm(feature_dim)
        self.joint_embed = nn.Parameter(torch.zeros(num_joints, feature_dim))
        self.conv1 = nn.Conv1d(feature_dim, feature_dim, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(feature_dim, feature_dim, kernel_size=3, padding=1)
        self.out_norm = nn.LayerNorm(feature_dim)
        self.probe = nn.Linear(feature_dim, num_classes)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv1d)):
                nn.init.trunc_normal_(module.weight, std=0.05)
                nn.init.zeros_(module.bias)
        nn.init.trunc_normal_(self.joint_embed, std=0.05)
        self.to(CHECKPOINT_DTYPE)

    def features(self, coords: torch.Tensor) -> torch.Tensor:
        """(B, T, J, 3) -> (B, T, J, feature_dim)."""
        if coords.ndim != 4 or coords.shape[2] != self.num_joints:
            raise ContractError(
                f"expected (B, T, {self.num_joints}, 3) coords, "
                f"got {tuple(coords.shape)}"
            )
        b, t, j, _ = coords.shape
        h = self.input_norm(self.point_embed(coords)) + self.joint_embed
        seq = h.permute(0, 2, 3, 1).reshape(b * j, self.feature_dim, t)
        seq = seq + self.conv2(F.gelu(self.conv1(seq)))
        h = seq.reshape(b, j, self.feature_dim, t).permute(0, 3, 1, 2)
        return self.out_norm(h)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        """Probe logits (B, num_classes)."""
        return self.probe(self.features(coords).mean(dim=(1, 2)))


def _dense_coords(pose3d: Skeleton3DSequence) -> torch.Tensor:
    return torch.as_tensor(pose3d.to_dense(), dtype=CHECKPOINT_DTYPE)


class FrozenSkeletonEncoder:
    """A weight-locked TemporalJointEncoder exposing the provider interface."""

    name = "temporal-joint-encoder"
    time_policy = "same"  # T_s equals the input frame count

    def __init__(self, encoder: TemporalJointEncoder):
        encoder = encoder.eval()
        encoder.requires_grad_(False)
        self._encoder = encoder
        self.feature_dim = encoder.feature_dim
        self.num_joints = encoder.num_joints
        self.num_classes = encoder.num_classes
        self.weight_hash = parameter_hash(encoder)

    def produce(self, pose3d: Skeleton3DSequence) -> SkeletonFeatures:
        with torch.no_grad():
            feats = self._encoder.features(_dense_coords(pose3d).unsqueeze(0))
        return SkeletonFeatures(feats[0].numpy())

    def probe_logits(self, pose3d: Skeleton3DSequence) -> np.ndarray:
        with torch.no_grad():
            logits = self._encoder(_dense_coords(pose3d).unsqueeze(0))
        return logits[0].numpy()


@dataclass
class ProviderStats:
    train_accuracy: float
    holdout_accuracy: float
    epochs: int
    seed: int


def pretrain_skeleton_encoder(
    samples: list[LabeledSample], num_classes: int, *,
    feature_dim: int = 32, epochs: int = 60, lr: float = 5e-3,
    holdout_per_class: int = 2, seed: int = 0,
) -> tuple[FrozenSkeletonEncoder, ProviderStats]:
    """One-time training of the reference provider on a skeleton stream.

    Deterministic under `seed`. The last `holdout_per_class` clips of each
    class gate the provider's quality.
    """
    poses = [(s.pose3d, s.clip.label) for s in samples]
    missing = [s.clip.id for s in samples if s.pose3d is None]
    if missing:
        raise DataError(f"samples without 3D poses: {missing[:5]}")
    by_class: dict[int, list] = {}
    for pose, label in poses:
        by_class.setdefault(label, []).append(pose)
    train, hold = [], []
    for label, pose_list in sorted(by_class.items()):
        cut = max(len(pose_list) - holdout_per_class, 1)
        train += [(p, label) for p in pose_list[:cut]]
        hold += [(p, label) for p in pose_list[cut:]]

    num_joints = train[0][0].num_joints
    torch.manual_seed(seed)
    encoder = TemporalJointEncoder(num_joints, num_classes, feature_dim)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)

    def batch(pairs):
        coords = torch.stack([_dense_coords(p) for p, _ in pairs])
        labels = torch.tensor([l for _, l in pairs])
        return coords, labels

    coords, labels = batch(train)
    rng = np.random.default_rng(seed)
    batch_size = min(16, len(train))
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            sel = torch.as_tensor(order[start:start + batch_size])
            opt.zero_grad()
            loss = F.cross_entropy(encoder(coords[sel]), labels[sel])
            loss.backward()
            opt.step()

    def accuracy(pairs):
        if not pairs:
            return 1.0
        c, l = batch(pairs)
        with torch.no_grad():
            pred = encoder(c).argmax(dim=1)
        return float((pred == l).double().mean())

    stats = ProviderStats(
        train_accuracy=accuracy(train), holdout_accuracy=accuracy(hold),
        epochs=epochs, seed=seed,
    )
    return FrozenSkeletonEncoder(encoder), stats


def save_provider(path, provider: FrozenSkeletonEncoder,
                  stats: ProviderStats | None = None) -> None:
    torch.save({
        "format": PROVIDER_FORMAT,
        "num_joints": provider.num_joints,
        "num_classes": provider.num_classes,
        "feature_dim": provider.feature_dim,
        "state": provider._encoder.state_dict(),
        "stats": None if stats is None else vars(stats),
    }, path)


def load_provider(path) -> FrozenSkeletonEncoder:
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != PROVIDER_FORMAT:
        raise ConfigError(f"{path}: unsupported provider format "
                          f"{payload.get('format')!r}")
    encoder = TemporalJointEncoder(payload["num_joints"], payload["num_classes"],
                                   payload["feature_dim"])
    encoder.load_state_dict(payload["state"])
    return FrozenSkeletonEncoder(encoder)
