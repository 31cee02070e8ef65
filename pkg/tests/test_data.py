"""Data core: pose files, synthetic generation, resampling."""
import json

import numpy as np
import pytest

from skelvit.data import (BACKGROUND_INTENSITY, LabeledSample,
                          Skeleton2DSequence, SyntheticSpec, VideoClip,
                          generate_synthetic, load_dataset, load_pose_file,
                          resample_clip, resample_indices, save_dataset,
                          save_pose_file)
from skelvit.errors import (ConfigError, DataError, PoseParseError,
                            PoseValidationError)


def write_pose(tmp_path, lines):
    path = tmp_path / "pose.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestPoseFiles:
    def test_single_entry_parses(self, tmp_path):
        path = write_pose(tmp_path, [
            '{"T": 1, "J": 1, "dims": 2}',
            '{"t": 1, "j": 1, "x": 3, "y": 5}',
        ])
        seq = load_pose_file(path, dims=2)
        assert len(seq) == 1
        # 1-based on disk becomes 0-based in memory
        assert seq.frame_idx[0] == 0 and seq.joint_idx[0] == 0
        assert tuple(seq.coords[0]) == (3.0, 5.0)

    def test_out_of_bounds_joint_rejected(self, tmp_path):
        path = write_pose(tmp_path, [
            '{"T": 2, "J": 2, "dims": 2}',
            '{"t": 1, "j": 3, "x": 0, "y": 0}',
        ])
        with pytest.raises(PoseValidationError):
            load_pose_file(path, dims=2)

    def test_duplicate_entry_rejected(self, tmp_path):
        path = write_pose(tmp_path, [
            '{"T": 2, "J": 2, "dims": 2}',
            '{"t": 1, "j": 1, "x": 0, "y": 0}',
            '{"t": 1, "j": 1, "x": 4, "y": 4}',
        ])
        with pytest.raises(PoseValidationError):
            load_pose_file(path, dims=2)

    def test_malformed_line_names_line(self, tmp_path):
        path = write_pose(tmp_path, [
            '{"T": 1, "J": 1, "dims": 2}',
            '{"t": 1, "j": 1 "x": 0}',
        ])
        with pytest.raises(PoseParseError, match="line 2"):
            load_pose_file(path, dims=2)

    def test_missing_field_names_line(self, tmp_path):
        path = write_pose(tmp_path, [
            '{"T": 1, "J": 1, "dims": 3}',
            '{"t": 1, "j": 1, "x": 0, "y": 0}',
        ])
        with pytest.raises(PoseParseError, match="line 2"):
            load_pose_file(path, dims=3)

    def test_dims_mismatch(self, tmp_path):
        path = write_pose(tmp_path, ['{"T": 1, "J": 1, "dims": 2}'])
        with pytest.raises(PoseValidationError):
            load_pose_file(path, dims=3)

    def test_round_trip(self, tmp_path):
        seq = Skeleton2DSequence(
            frame_idx=np.array([0, 1, 1]), joint_idx=np.array([0, 0, 1]),
            coords=np.array([[1.5, 2.5], [3.0, -1.0], [0.25, 7.75]]),
            num_frames=2, num_joints=2)
        save_pose_file(tmp_path / "p.jsonl", seq)
        loaded = load_pose_file(tmp_path / "p.jsonl", dims=2)
        assert np.array_equal(loaded.frame_idx, seq.frame_idx)
        assert np.array_equal(loaded.joint_idx, seq.joint_idx)
        assert np.allclose(loaded.coords, seq.coords)


class TestSyntheticGeneration:
    def test_equal_specs_bit_identical(self):
        spec = SyntheticSpec(num_classes=2, clips_per_class=3, seed=7)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.clip.frames, sb.clip.frames)
            assert np.array_equal(sa.pose2d.coords, sb.pose2d.coords)
            assert np.array_equal(sa.pose3d.coords, sb.pose3d.coords)

    def test_counts_and_labels(self):
        samples = generate_synthetic(SyntheticSpec(num_classes=4,
                                                   clips_per_class=8, seed=0))
        assert len(samples) == 32
        labels = [s.clip.label for s in samples]
        assert all(labels.count(c) == 8 for c in range(4))

    def test_rendered_disc_covers_every_pose_entry(self):
        # whole-set check: the rounded (y, x) pixel of each entry is lit
        samples = generate_synthetic(SyntheticSpec(num_classes=4,
                                                   clips_per_class=2, seed=5))
        for s in samples:
            pose = s.pose2d
            for t, j, (x, y) in zip(pose.frame_idx, pose.joint_idx, pose.coords):
                r, c = int(round(y)), int(round(x))
                intensity = s.clip.frames[t, r, c].max()
                assert intensity > BACKGROUND_INTENSITY

    def test_pose_entries_inside_frame(self):
        spec = SyntheticSpec(num_classes=4, clips_per_class=2, seed=9)
        for s in generate_synthetic(spec):
            assert s.pose2d.coords[:, 0].min() >= 0
            assert s.pose2d.coords[:, 0].max() < spec.width
            assert s.pose2d.coords[:, 1].min() >= 0
            assert s.pose2d.coords[:, 1].max() < spec.height

    def test_discs_must_fit(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(height=8, width=8, num_joints=10, render_radius=3.0)

    def test_classes_share_appearance_not_motion(self):
        # per-frame pixel statistics match across classes; motion energy differs
        samples = generate_synthetic(SyntheticSpec(num_classes=4,
                                                   clips_per_class=4, seed=2))
        by_label = {}
        for s in samples:
            tracks = s.pose2d.coords.reshape(s.clip.num_frames, -1, 2)
            moved = np.abs(np.diff(tracks, axis=0)).sum()
            by_label.setdefault(s.clip.label, []).append(moved)
        static = np.mean(by_label[0])
        moving = min(np.mean(by_label[c]) for c in (1, 2, 3))
        assert static < 1e-9 < moving


class TestResample:
    def make_clip(self, num_frames):
        frames = np.zeros((num_frames, 4, 4, 3))
        for t in range(num_frames):
            frames[t, 0, 0, 0] = t / max(num_frames, 1)
        return VideoClip(id="c", frames=frames, label=0)

    def test_downsample_indices(self):
        assert resample_indices(8, 4).tolist() == [0, 2, 4, 6]

    def test_identity(self):
        clip = self.make_clip(4)
        assert resample_clip(clip, 4) is clip

    def test_upsample_indices(self):
        assert resample_indices(3, 6).tolist() == [0, 0, 1, 1, 2, 2]

    def test_frames_follow_indices(self):
        clip = self.make_clip(8)
        out = resample_clip(clip, 4)
        assert np.array_equal(out.frames, clip.frames[[0, 2, 4, 6]])

    def test_pose_resampled_with_same_indices(self):
        samples = generate_synthetic(SyntheticSpec(num_classes=1,
                                                   clips_per_class=1,
                                                   num_frames=8, seed=1))
        pose = samples[0].pose2d
        out = pose.select_frames(resample_indices(8, 4))
        assert out.num_frames == 4
        src = pose.coords[pose.frame_idx == 2]
        dst = out.coords[out.frame_idx == 1]
        assert np.array_equal(np.sort(src, axis=0), np.sort(dst, axis=0))


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        samples = generate_synthetic(SyntheticSpec(num_classes=2,
                                                   clips_per_class=2, seed=3))
        save_dataset(samples, tmp_path / "d", num_classes=2)
        loaded, meta = load_dataset(tmp_path / "d")
        assert meta["num_classes"] == 2
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert a.clip.id == b.clip.id
            assert np.array_equal(a.clip.frames, b.clip.frames)
            assert np.allclose(a.pose2d.coords, b.pose2d.coords)
            assert np.allclose(a.pose3d.coords, b.pose3d.coords)

    def test_missing_pose_files_load_as_none(self, tmp_path):
        samples = generate_synthetic(SyntheticSpec(num_classes=1,
                                                   clips_per_class=1, seed=3))
        save_dataset(samples, tmp_path / "d", num_classes=1)
        for pose_file in (tmp_path / "d").glob("*_pose*.jsonl"):
            pose_file.unlink()
        loaded, _ = load_dataset(tmp_path / "d")
        assert loaded[0].pose2d is None and loaded[0].pose3d is None

    def test_pose_clip_frame_mismatch_rejected(self):
        samples = generate_synthetic(SyntheticSpec(num_classes=1,
                                                   clips_per_class=1, seed=3))
        short = resample_clip(samples[0].clip, 2)
        with pytest.raises(DataError):
            LabeledSample(clip=short, pose2d=samples[0].pose2d)
