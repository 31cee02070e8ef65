"""Trainer composition: loss bundle, KD baselines, stripping, fusion."""
import copy
import hashlib
import json
import math

import numpy as np
import pytest
import torch

from conftest import TINY_PATCH
from skelvit.backbone import VideoTransformer, count_macs
from skelvit.data import LabeledSample
from skelvit.errors import ConfigError, ContractError, DataError
from skelvit.trainer import (FusionConfig, TrainConfig, TrainableModel,
                             build_model, compute_losses, count_parameters,
                             eval_align_loss, late_fuse, prepare_targets,
                             run_kd_baseline, strip, train, train_step)

NUM_JOINTS = 3  # tiny_samples joint count


def make_cfg(**kwargs):
    return TrainConfig(**{"epochs": 2, "batch_size": 6, "seed": 0, **kwargs})


def make_full_model(provider, **kwargs):
    cfg = make_cfg(**kwargs)
    return build_model(TINY_PATCH, cfg, num_joints=NUM_JOINTS,
                       provider_dim=provider.feature_dim)


class TestLossBundle:
    def test_disabled_modules_reduce_to_cls(self, tiny_samples):
        cfg = make_cfg(map_layers=(), align_layers=())
        model = build_model(TINY_PATCH, cfg)
        targets = prepare_targets(tiny_samples[:4], TINY_PATCH, cfg)
        total, bundle = compute_losses(model, tiny_samples[:4], targets)
        assert bundle.total == bundle.cls_loss
        assert bundle.map_loss == bundle.align_loss == bundle.aux_cls_loss == 0

    def test_zero_aux_weights_reduce_to_cls(self, tiny_samples, tiny_provider):
        model = make_full_model(tiny_provider, loss_weights=(1.0, 0.0, 0.0))
        targets = prepare_targets(tiny_samples[:4], TINY_PATCH,
                                  model.train_cfg, tiny_provider)
        total, bundle = compute_losses(model, tiny_samples[:4], targets)
        assert bundle.map_loss > 0 and bundle.align_loss > 0
        assert abs(bundle.total - bundle.cls_loss) < 1e-12

    def test_decomposition_identity(self, tiny_samples, tiny_provider):
        model = make_full_model(tiny_provider, loss_weights=(1.0, 0.5, 2.0))
        targets = prepare_targets(tiny_samples[:4], TINY_PATCH,
                                  model.train_cfg, tiny_provider)
        _, b = compute_losses(model, tiny_samples[:4], targets)
        expected = (1.0 * b.cls_loss + 0.5 * b.map_loss
                    + 2.0 * (b.align_loss + b.aux_cls_loss))
        assert abs(b.total - expected) < 1e-12

    def test_missing_pose_names_sample(self, tiny_samples, tiny_provider):
        bare = LabeledSample(clip=tiny_samples[0].clip)
        cfg = make_cfg()
        with pytest.raises(DataError, match=bare.clip.id):
            prepare_targets([bare], TINY_PATCH, cfg, tiny_provider)

    def test_multiple_placements_sum(self, tiny_samples, tiny_provider):
        single = make_full_model(tiny_provider, map_layers=(1,))
        double = make_full_model(tiny_provider, map_layers=(1, 2))
        targets = prepare_targets(tiny_samples[:4], TINY_PATCH,
                                  double.train_cfg, tiny_provider)
        with torch.no_grad():
            double.map_heads["1"].load_state_dict(
                single.map_heads["1"].state_dict())
            double.backbone.load_state_dict(single.backbone.state_dict())
            double.align_heads["2"].load_state_dict(
                single.align_heads["2"].state_dict())
        _, b1 = compute_losses(single, tiny_samples[:4], targets)
        _, b2 = compute_losses(double, tiny_samples[:4], targets)
        assert b2.map_loss > b1.map_loss  # second head adds its own term


class TestTrainStep:
    def test_descent_on_fixed_batch(self, tiny_samples, tiny_provider):
        decreased = 0
        for seed in range(10):
            cfg = make_cfg(seed=seed, lr=1e-3)
            model = build_model(TINY_PATCH, cfg, num_joints=NUM_JOINTS,
                                provider_dim=tiny_provider.feature_dim)
            batch = tiny_samples[:6]
            targets = prepare_targets(batch, TINY_PATCH, cfg, tiny_provider)
            opt = torch.optim.Adam(model.parameters(), lr=1e-3)
            with torch.no_grad():
                _, before = compute_losses(model, batch, targets)
            train_step(model, opt, batch, targets)
            with torch.no_grad():
                _, after = compute_losses(model, batch, targets)
            decreased += after.total < before.total
        assert decreased >= 8

    def test_training_is_deterministic(self, tiny_samples, tiny_provider):
        histories = []
        for _ in range(2):
            model = make_full_model(tiny_provider)
            history = train(model, tiny_samples, provider=tiny_provider)
            histories.append([b.total for b in history])
        assert histories[0] == histories[1]

    def test_log_lines_decompose(self, tiny_samples, tiny_provider, tmp_path):
        model = make_full_model(tiny_provider)
        log = tmp_path / "log.jsonl"
        train(model, tiny_samples, provider=tiny_provider, log_path=log)
        lines = log.read_text().splitlines()
        assert lines
        for line in lines:
            rec = json.loads(line)
            expected = (rec["cls_loss"] + rec["map_loss"]
                        + rec["align_loss"] + rec["aux_cls_loss"])
            assert abs(rec["total"] - expected) < 1e-9

    def test_provider_frozen_through_training(self, tiny_samples,
                                              tiny_provider):
        def checksum():
            digest = hashlib.sha256()
            for s in tiny_samples:
                digest.update(tiny_provider.produce(s.pose3d).values.tobytes())
            return digest.hexdigest()

        before = checksum()
        model = make_full_model(tiny_provider)
        train(model, tiny_samples, provider=tiny_provider)
        assert checksum() == before


class TestKdBaselines:
    def test_distill_token_adds_one_row(self, tiny_provider):
        model = make_full_model(tiny_provider, kd_baseline="fd-distill",
                                map_layers=(), align_layers=())
        assert model.token_rows == TINY_PATCH.token_rows + 1
        plain = make_full_model(tiny_provider, kd_baseline="fd-class",
                                map_layers=(), align_layers=())
        assert plain.token_rows == TINY_PATCH.token_rows

    def test_fd_class_matches_mse_oracle(self, tiny_samples, tiny_provider):
        model = make_full_model(tiny_provider, kd_baseline="fd-class",
                                map_layers=(), align_layers=())
        batch = tiny_samples[:4]
        targets = prepare_targets(batch, TINY_PATCH, model.train_cfg,
                                  tiny_provider)
        bundle = run_kd_baseline(model, batch, targets)
        with torch.no_grad():
            frames = torch.stack([torch.as_tensor(s.clip.frames)
                                  for s in batch]).double()
            _, taps = model.backbone(frames, (TINY_PATCH.depth,))
            token = taps[TINY_PATCH.depth][:, 0]
            adapted = model.kd_adapter(token).numpy()
        target = np.stack([targets.align_global[s.clip.id] for s in batch])
        oracle = ((adapted - target) ** 2).mean()
        assert abs(bundle.align_loss - oracle) < 1e-10

    def test_ld_with_identical_logits_gives_self_entropy(self, tiny_samples,
                                                         tiny_provider):
        model = make_full_model(tiny_provider, kd_baseline="ld-class",
                                map_layers=(), align_layers=())
        batch = tiny_samples[:3]
        targets = prepare_targets(batch, TINY_PATCH, model.train_cfg,
                                  tiny_provider)
        with torch.no_grad():
            frames = torch.stack([torch.as_tensor(s.clip.frames)
                                  for s in batch]).double()
            logits, _ = model.backbone(frames)
        for s, row in zip(batch, logits.numpy()):
            targets.teacher_logits[s.clip.id] = row
        bundle = run_kd_baseline(model, batch, targets)
        probs = torch.softmax(logits, dim=-1).numpy()
        entropy = float(-(probs * np.log(probs)).sum(axis=1).mean())
        assert abs(bundle.align_loss - entropy) < 1e-10

    def test_kd_replaces_aux_losses(self, tiny_samples, tiny_provider):
        model = make_full_model(tiny_provider, kd_baseline="ld-distill",
                                map_layers=(), align_layers=())
        batch = tiny_samples[:3]
        targets = prepare_targets(batch, TINY_PATCH, model.train_cfg,
                                  tiny_provider)
        bundle = run_kd_baseline(model, batch, targets)
        assert bundle.map_loss == 0 and bundle.aux_cls_loss == 0
        assert bundle.align_loss > 0

    def test_kd_baseline_trains(self, tiny_samples, tiny_provider):
        model = make_full_model(tiny_provider, kd_baseline="fd-distill",
                                map_layers=(), align_layers=())
        history = train(model, tiny_samples, provider=tiny_provider)
        assert all(math.isfinite(b.total) for b in history)

    def test_run_kd_baseline_requires_kd_config(self, tiny_samples,
                                                tiny_provider):
        model = make_full_model(tiny_provider)
        with pytest.raises(ConfigError):
            run_kd_baseline(model, tiny_samples[:2], None)


class TestStrip:
    def test_parameter_count_matches_fresh_backbone(self, tiny_samples,
                                                    tiny_provider):
        model = make_full_model(tiny_provider)
        stripped = strip(model)
        torch.manual_seed(123)
        fresh = VideoTransformer(TINY_PATCH)
        assert count_parameters(stripped) == count_parameters(fresh)
        assert count_parameters(model) > count_parameters(stripped)

    def test_macs_match_baseline(self, tiny_provider):
        model = make_full_model(tiny_provider)
        assert count_macs(strip(model).cfg) == count_macs(TINY_PATCH)

    def test_logits_bitwise_equal_on_100_clips(self, tiny_provider):
        model = make_full_model(tiny_provider)
        rng = np.random.default_rng(0)
        from skelvit.data import VideoClip
        clips = [VideoClip(id=f"c{i}",
                           frames=rng.uniform(0, 1, (4, 16, 16, 3)), label=0)
                 for i in range(100)]
        stripped = strip(model)
        got = stripped.predict_logits(clips)
        want = model.backbone.predict_logits(clips)
        assert np.max(np.abs(got - want)) == 0.0

    def test_stripping_kd_model_removes_extra_token(self, tiny_provider):
        model = make_full_model(tiny_provider, kd_baseline="ld-distill",
                                map_layers=(), align_layers=())
        stripped = strip(model)
        torch.manual_seed(5)
        assert count_parameters(stripped) == count_parameters(
            VideoTransformer(TINY_PATCH))

    def test_train_only_names_cover_heads(self, tiny_provider):
        model = make_full_model(tiny_provider)
        names = set(model.train_only_parameter_names())
        assert names
        assert all(not n.startswith("backbone.") for n in names)
        all_names = {n for n, _ in model.named_parameters()}
        assert names == {n for n in all_names if not n.startswith("backbone.")}


class TestLateFusion:
    def test_identical_inputs_idempotent(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(5, 4))
        fused = late_fuse(logits, logits)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        softmax = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(fused, softmax, atol=1e-12)

    def test_zero_pose_weight_returns_rgb(self):
        rng = np.random.default_rng(2)
        rgb, pose = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        fused = late_fuse(rgb, pose, FusionConfig(weight_rgb=1.0,
                                                  weight_pose=0.0))
        e = np.exp(rgb - rgb.max(axis=1, keepdims=True))
        assert np.allclose(fused, e / e.sum(axis=1, keepdims=True))

    def test_rows_normalized(self):
        rng = np.random.default_rng(3)
        fused = late_fuse(rng.normal(size=(6, 5)), rng.normal(size=(6, 5)),
                          FusionConfig(weight_rgb=0.3, weight_pose=0.9))
        assert np.allclose(fused.sum(axis=1), 1.0)

    def test_class_count_mismatch_rejected(self):
        with pytest.raises(ContractError):
            late_fuse(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_bad_weights_rejected(self):
        with pytest.raises(ConfigError):
            FusionConfig(weight_rgb=0.0, weight_pose=0.0)


class TestAlignEval:
    def test_eval_align_loss_runs_without_grads(self, tiny_samples,
                                                tiny_provider):
        model = make_full_model(tiny_provider)
        value = eval_align_loss(model, tiny_samples[:4], tiny_provider)
        assert value > 0

    def test_requires_alignment_heads(self, tiny_samples, tiny_provider):
        model = build_model(TINY_PATCH, make_cfg(map_layers=(),
                                                 align_layers=()))
        with pytest.raises(ConfigError):
            eval_align_loss(model, tiny_samples[:2], tiny_provider)
