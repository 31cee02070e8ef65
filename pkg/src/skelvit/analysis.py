"""Noise-robustness protocols and feature-space analyses."""
from __future__ import annotations

import numpy as np
import torch

from .align import SkeletonFeatureProvider, feature_channel_std
from .backbone import PatchConfig
from .data import LabeledSample
from .errors import ConfigError
from .jointmap import (add_pixel_noise, build_pixel_map, pool_token_map,
                       token_map_iou)
from .trainer import TrainableModel, compute_losses, prepare_targets


def map_noise_curve(samples: list[LabeledSample], patch_cfg: PatchConfig,
                    levels, num_seeds: int = 50, seed: int = 0) -> np.ndarray:
    """Mean clean-vs-noisy token-map IoU per pixel noise level.

    For each sample and seed, joint coordinates get independent uniform
    [0, level] offsets before the map is rebuilt; the IoU against the clean
    map is averaged over samples and seeds.
    """
    levels = list(levels)
    clean_maps = []
    for sample in samples:
        if sample.pose2d is None:
            raise ConfigError(f"sample {sample.clip.id} has no 2D pose")
        pixel = build_pixel_map(sample.pose2d, patch_cfg.height, patch_cfg.width)
        clean_maps.append(pool_token_map(pixel, patch_cfg))
    means = np.zeros(len(levels))
    for li, level in enumerate(levels):
        total = 0.0
        for s in range(num_seeds):
            for sample, clean in zip(samples, clean_maps):
                noisy_pose = add_pixel_noise(sample.pose2d, level,
                                             seed=seed + 1000 * s + li)
                noisy = pool_token_map(
                    build_pixel_map(noisy_pose, patch_cfg.height,
                                    patch_cfg.width), patch_cfg)
                total += token_map_iou(clean, noisy)
        means[li] = total / (num_seeds * len(samples))
    return means


def feature_noise_curve(model: TrainableModel, samples: list[LabeledSample],
                        provider: SkeletonFeatureProvider, levels,
                        num_seeds: int = 20, seed: int = 0) -> np.ndarray:
    """Mean alignment loss per feature noise level (in channel-std multiples).

    Noise perturbs the provider targets of a trained model; the reported
    value is the no-grad alignment loss, averaged over seeds.
    """
    if not model.align_heads:
        raise ConfigError("model has no alignment heads to measure")
    levels = list(levels)
    channel_std = feature_channel_std(
        [provider.produce(s.pose3d) for s in samples])
    means = np.zeros(len(levels))
    for li, level in enumerate(levels):
        values = []
        for s in range(num_seeds):
            targets = prepare_targets(
                samples, model.patch_cfg, model.train_cfg, provider,
                feature_noise=(level, channel_std, seed + 1000 * s + li))
            with torch.no_grad():
                _, bundle = compute_losses(model, samples, targets)
            values.append(bundle.align_loss)
        means[li] = float(np.mean(values))
    return means
