"""Shared fixtures and the finite-difference gradient checker."""
from __future__ import annotations

import numpy as np
import pytest
import torch

from skelvit.backbone import PatchConfig
from skelvit.data import SyntheticSpec, generate_synthetic
from skelvit.skeleton_model import pretrain_skeleton_encoder

# Small geometry used by unit tests; well under 5e4 parameters.
TINY_PATCH = PatchConfig(frames=4, height=16, width=16, patch_time=1,
                         patch_size=8, embed_dim=16, depth=2, heads=2,
                         num_classes=3)


@pytest.fixture(scope="session")
def tiny_samples():
    spec = SyntheticSpec(num_classes=3, clips_per_class=4, num_frames=4,
                         height=16, width=16, num_joints=3, seed=11,
                         motion_amplitude=5.0, render_radius=1.5)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def tiny_provider(tiny_samples):
    provider, _ = pretrain_skeleton_encoder(tiny_samples, num_classes=3,
                                            feature_dim=8, epochs=20, seed=3)
    return provider


# Desk-scale setup shared by the provider quality gate and acceptance tests.
DESK_PATCH = PatchConfig(frames=4, height=32, width=32, patch_time=1,
                         patch_size=8, embed_dim=64, depth=4, heads=4,
                         num_classes=4)
DESK_TRAIN_SPEC = SyntheticSpec(num_classes=4, clips_per_class=32, seed=7)
DESK_HOLDOUT_SPEC = SyntheticSpec(num_classes=4, clips_per_class=8, seed=1007)


@pytest.fixture(scope="session")
def desk_train_samples():
    return generate_synthetic(DESK_TRAIN_SPEC)


@pytest.fixture(scope="session")
def desk_holdout_samples():
    return generate_synthetic(DESK_HOLDOUT_SPEC)


@pytest.fixture(scope="session")
def desk_provider_bundle(desk_train_samples):
    return pretrain_skeleton_encoder(desk_train_samples, num_classes=4,
                                     feature_dim=32, epochs=60, seed=0)


@pytest.fixture(scope="session")
def desk_provider(desk_provider_bundle):
    return desk_provider_bundle[0]


@pytest.fixture(scope="session")
def desk_provider_stats(desk_provider_bundle):
    return desk_provider_bundle[1]


def finite_difference_check(loss_fn, parameters, num_coords: int = 20,
                            seed: int = 0, step: float = 1e-6,
                            rel_tol: float = 1e-5, noise_floor: float = 1e-9) -> float:
    """Compare autograd gradients with central differences.

    `loss_fn` recomputes the scalar loss from the parameters' current values.
    Checks `num_coords` randomly chosen parameter coordinates at relative
    tolerance `rel_tol`; absolute differences under `noise_floor` pass
    outright, since that is the roundoff scale of a 64-bit central
    difference with h=1e-6 (relative error is meaningless for coordinates
    whose gradient sits below the difference noise). Returns the worst
    relative error among the coordinates above the floor.
    """
    parameters = [p for p in parameters if p.requires_grad]
    assert parameters, "nothing to check"
    for p in parameters:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in parameters])
    offsets = np.cumsum(sizes)
    worst = 0.0
    for flat_index in rng.choice(int(offsets[-1]), size=num_coords, replace=False):
        p_idx = int(np.searchsorted(offsets, flat_index, side="right"))
        local = int(flat_index - (offsets[p_idx - 1] if p_idx else 0))
        param = parameters[p_idx]
        # parameters the loss does not reach have grad None, i.e. zero
        autograd = (0.0 if param.grad is None
                    else float(param.grad.reshape(-1)[local]))
        original = float(param.data.reshape(-1)[local])
        h = step * max(1.0, abs(original))
        with torch.no_grad():
            param.data.reshape(-1)[local] = original + h
            up = float(loss_fn())
            param.data.reshape(-1)[local] = original - h
            down = float(loss_fn())
            param.data.reshape(-1)[local] = original
        numeric = (up - down) / (2 * h)
        if abs(autograd - numeric) <= noise_floor:
            continue
        rel = abs(autograd - numeric) / max(abs(autograd), abs(numeric))
        worst = max(worst, rel)
    assert worst <= rel_tol, f"worst relative gradient error {worst:.3e}"
    return worst
