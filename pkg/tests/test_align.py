"""Feature alignment: pooling, time reconciliation, losses, noise, caches."""
import math

import numpy as np
import pytest
import torch

from conftest import TINY_PATCH, finite_difference_check
from skelvit.align import (AlignConfig, FeatureAlignHead, SkeletonFeatures,
                           add_feature_noise, alignment_loss, aux_loss_3d,
                           feature_channel_std, match_time,
                           pool_skeleton_features, pool_tokens,
                           read_feature_cache, write_feature_cache)
from skelvit.backbone import VideoTransformer
from skelvit.errors import ConfigError, ContractError


def random_features(rng, t=4, j=5, d=8):
    return SkeletonFeatures(rng.normal(size=(t, j, d)))


class TestTargetPooling:
    def test_constant_tensor_pools_to_constant(self):
        feats = SkeletonFeatures(np.full((3, 4, 2), 1.7))
        assert np.allclose(pool_skeleton_features(feats, "global"), 1.7)
        assert np.allclose(pool_skeleton_features(feats, "local"), 1.7)

    def test_global_mean_analytic(self):
        feats = SkeletonFeatures(np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1))
        assert pool_skeleton_features(feats, "global")[0] == 2.5

    def test_local_matches_per_frame_loop(self):
        rng = np.random.default_rng(0)
        feats = random_features(rng)
        got = pool_skeleton_features(feats, "local")
        expected = np.stack([feats.values[t].mean(axis=0) for t in range(4)])
        assert np.allclose(got, expected, atol=1e-12)
        assert got.shape == (4, 8)


class TestVisualPooling:
    def test_global_invariant_to_patch_permutation(self):
        rng = np.random.default_rng(1)
        tokens = torch.as_tensor(rng.normal(
            size=(TINY_PATCH.token_rows, TINY_PATCH.embed_dim)))
        pooled = pool_tokens(tokens, "global", TINY_PATCH)
        perm = rng.permutation(TINY_PATCH.patch_tokens)
        shuffled = tokens.clone()
        shuffled[1:] = tokens[1:][perm]
        assert torch.allclose(pool_tokens(shuffled, "global", TINY_PATCH),
                              pooled)

    def test_local_shape(self):
        tokens = torch.zeros(TINY_PATCH.token_rows, TINY_PATCH.embed_dim,
                             dtype=torch.float64)
        out = pool_tokens(tokens, "local", TINY_PATCH)
        assert out.shape == (TINY_PATCH.time_tokens, TINY_PATCH.embed_dim)

    def test_local_matches_per_frame_spatial_mean(self):
        rng = np.random.default_rng(2)
        tokens = torch.as_tensor(rng.normal(
            size=(TINY_PATCH.token_rows, TINY_PATCH.embed_dim)))
        got = pool_tokens(tokens, "local", TINY_PATCH).numpy()
        patches = tokens[1:].numpy().reshape(TINY_PATCH.time_tokens,
                                             TINY_PATCH.space_tokens, -1)
        expected = patches.mean(axis=1)
        assert np.allclose(got, expected, atol=1e-12)

    def test_class_token_excluded(self):
        tokens = torch.zeros(TINY_PATCH.token_rows, TINY_PATCH.embed_dim,
                             dtype=torch.float64)
        tokens[0] = 100.0
        assert float(pool_tokens(tokens, "global", TINY_PATCH).abs().max()) == 0


class TestTimeReconciliation:
    def test_downsample(self):
        feats = np.arange(8)[:, None].astype(float)
        assert match_time(feats, 4).reshape(-1).tolist() == [0, 2, 4, 6]

    def test_repeat_last(self):
        feats = np.arange(2)[:, None].astype(float)
        assert match_time(feats, 4).reshape(-1).tolist() == [0, 1, 1, 1]

    def test_identity(self):
        feats = np.arange(4)[:, None].astype(float)
        assert np.array_equal(match_time(feats, 4), feats)


class TestProjection:
    def make_head(self, **kwargs):
        torch.manual_seed(0)
        return FeatureAlignHead(TINY_PATCH, feature_dim=6,
                                align_cfg=AlignConfig(**kwargs))

    def test_zero_weights_zero_output(self):
        head = self.make_head()
        with torch.no_grad():
            for p in head.projector.parameters():
                p.zero_()
            out = head.project(torch.randn(4, TINY_PATCH.embed_dim,
                                           dtype=torch.float64))
        assert float(out.abs().max()) == 0.0

    def test_projection_widths(self):
        head = self.make_head()
        out = head.project(torch.zeros(TINY_PATCH.embed_dim,
                                       dtype=torch.float64).unsqueeze(0))
        assert out.shape == (1, 6)
        local = head.project(torch.zeros(2, 4, TINY_PATCH.embed_dim,
                                         dtype=torch.float64))
        assert local.shape == (2, 4, 6)

    def test_fc_matches_matrix_vector_oracle(self):
        head = self.make_head()
        rng = np.random.default_rng(3)
        x = rng.normal(size=TINY_PATCH.embed_dim)
        got = head.project(torch.as_tensor(x).unsqueeze(0))[0].detach().numpy()
        w = head.projector.weight.detach().numpy()
        b = head.projector.bias.detach().numpy()
        assert np.allclose(got, w @ x + b, atol=1e-12)

    def test_width_mismatch_rejected(self):
        head = self.make_head()
        with pytest.raises(ContractError):
            head.project(torch.zeros(1, 7, dtype=torch.float64))

    @pytest.mark.parametrize("kind", ["mlp", "transformer"])
    def test_other_head_kinds_run(self, kind):
        head = self.make_head(head_kind=kind)
        out = head.project(torch.randn(3, TINY_PATCH.embed_dim,
                                       dtype=torch.float64))
        assert out.shape == (3, 6)


class TestAlignmentLoss:
    def test_identical_inputs_zero(self):
        x = torch.randn(5, dtype=torch.float64)
        assert float(alignment_loss(x, x, "global")) == 0.0

    def test_global_analytic(self):
        target = torch.tensor([1.0, 3.0])
        pred = torch.tensor([2.0, 2.0])
        assert float(alignment_loss(target, pred, "global")) == 1.0

    def test_local_matches_double_loop_oracle(self):
        rng = np.random.default_rng(4)
        target = rng.normal(size=(4, 6))
        pred = rng.normal(size=(4, 6))
        got = float(alignment_loss(torch.as_tensor(target),
                                   torch.as_tensor(pred), "local"))
        acc = 0.0
        for t in range(4):
            inner = 0.0
            for d in range(6):
                inner += (target[t, d] - pred[t, d]) ** 2
            acc += inner / 6
        assert abs(got - acc / 4) < 1e-10

    def test_mse_inner_sum(self):
        target = torch.tensor([1.0, 3.0])
        pred = torch.tensor([2.0, 2.0])
        assert float(alignment_loss(target, pred, "global",
                                    mse_inner="sum")) == 2.0

    def test_nonnegative_random(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = torch.as_tensor(rng.normal(size=(3, 4)))
            b = torch.as_tensor(rng.normal(size=(3, 4)))
            assert float(alignment_loss(a, b, "local")) >= 0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            alignment_loss(torch.zeros(3), torch.zeros(4, dtype=torch.float64),
                           "global")


class TestCombinedLoss:
    def make_head(self, with_classifier):
        torch.manual_seed(1)
        return FeatureAlignHead(TINY_PATCH, feature_dim=6,
                                align_cfg=AlignConfig(
                                    with_classifier=with_classifier))

    def test_without_classifier_equals_align(self):
        head = self.make_head(with_classifier=False)
        rng = np.random.default_rng(6)
        target = torch.as_tensor(rng.normal(size=(2, 6)))
        pred = torch.as_tensor(rng.normal(size=(2, 6)))
        total, align, cls = aux_loss_3d(target, pred, [0, 1], head)
        assert float(total) == float(align)
        assert float(cls) == 0.0

    def test_uniform_classifier_adds_log_c(self):
        head = self.make_head(with_classifier=True)
        with torch.no_grad():
            head.classifier.weight.zero_()
            head.classifier.bias.zero_()
        rng = np.random.default_rng(7)
        target = torch.as_tensor(rng.normal(size=(2, 6)))
        pred = torch.as_tensor(rng.normal(size=(2, 6)))
        total, align, cls = aux_loss_3d(target, pred, [0, 1], head)
        assert abs(float(cls) - math.log(TINY_PATCH.num_classes)) < 1e-12
        assert abs(float(total) - float(align) - float(cls)) < 1e-12

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(2)
        model = VideoTransformer(TINY_PATCH)
        head = self.make_head(with_classifier=True)
        rng = np.random.default_rng(8)
        frames = torch.as_tensor(rng.uniform(0, 1, (1, 4, 16, 16, 3)))
        target = torch.as_tensor(rng.normal(size=(1, 6)))
        labels = torch.tensor([1])

        def loss_fn():
            _, taps = model.forward(frames, tap_layers=(2,))
            pooled = pool_tokens(taps[2], "global", TINY_PATCH)
            pred = head.project(pooled)
            total, _, _ = aux_loss_3d(target, pred, labels, head)
            return total

        params = list(model.parameters()) + list(head.parameters())
        finite_difference_check(loss_fn, params, num_coords=20, seed=2)


class TestFeatureNoise:
    def test_level_zero_noop(self):
        rng = np.random.default_rng(9)
        feats = random_features(rng)
        sigma = np.ones(8)
        assert add_feature_noise(feats, 0.0, sigma, seed=1) is feats

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(9)
        feats = random_features(rng)
        sigma = feature_channel_std([feats])
        a = add_feature_noise(feats, 1.0, sigma, seed=5)
        b = add_feature_noise(feats, 1.0, sigma, seed=5)
        assert np.array_equal(a.values, b.values)

    def test_noise_scale_respects_channel_std(self):
        rng = np.random.default_rng(10)
        feats = random_features(rng, t=6, j=4, d=2)
        sigma = np.array([1.0, 10.0])
        noisy = add_feature_noise(feats, 2.0, sigma, seed=0)
        delta = noisy.values - feats.values
        assert delta.min() >= 0
        assert delta[..., 0].max() <= 2.0
        assert delta[..., 1].max() <= 20.0
        assert delta[..., 1].max() > 2.0  # actually uses the larger scale

    def test_negative_level_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ConfigError):
            add_feature_noise(random_features(rng), -0.5, np.ones(8), seed=0)

    def test_channel_std_matches_numpy(self):
        rng = np.random.default_rng(12)
        feats = [random_features(rng) for _ in range(3)]
        got = feature_channel_std(feats)
        stacked = np.concatenate([f.values.reshape(-1, 8) for f in feats])
        assert np.allclose(got, stacked.std(axis=0), atol=1e-12)


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        feats = SkeletonFeatures(
            rng.normal(size=(3, 4, 5)).astype(np.float32).astype(np.float64))
        write_feature_cache(tmp_path / "f.svfeat", feats, "enc", "abc123")
        back, name, weight_hash = read_feature_cache(tmp_path / "f.svfeat")
        assert name == "enc" and weight_hash == "abc123"
        assert np.array_equal(back.values, feats.values)  # f32-exact payload

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"nope")
        with pytest.raises(ContractError):
            read_feature_cache(tmp_path / "junk")
