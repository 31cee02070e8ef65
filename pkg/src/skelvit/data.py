"""Core data types, pose-file ingestion, and the synthetic motion dataset.

Pose files use 1-based frame/joint indices on disk; everything in memory is
0-based. The conversion happens exactly once, at parse time.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, PoseParseError, PoseValidationError

DATASET_FORMAT = "skelvit.dataset/1"
POSE_SCHEMA_FORMAT = "skelvit.pose-jsonl/1"

# Synthetic frames are zero everywhere except the rendered joint discs.
BACKGROUND_INTENSITY = 0.0


@dataclass(frozen=True)
class VideoClip:
    """An RGB clip: frames of shape (T, H, W, 3) with values in [0, 1]."""

    id: str
    frames: np.ndarray
    label: int
    fps: float = 30.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[3] != 3:
            raise ConfigError(f"frames must have shape (T, H, W, 3), got {f.shape}")
        if min(f.shape[:3]) < 1:
            raise ConfigError(f"frames must be non-empty, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ConfigError("frames contain non-finite values")
        if self.label < 0:
            raise ConfigError(f"label must be non-negative, got {self.label}")
        if self.fps <= 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", f)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


def _validate_entries(frame_idx, joint_idx, coords, num_frames, num_joints, dims):
    frame_idx = np.asarray(frame_idx, dtype=np.int64).reshape(-1)
    joint_idx = np.asarray(joint_idx, dtype=np.int64).reshape(-1)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, dims)
    if not (len(frame_idx) == len(joint_idx) == len(coords)):
        raise PoseValidationError("entry arrays have mismatched lengths")
    if num_frames < 1 or num_joints < 1:
        raise PoseValidationError(
            f"frame/joint counts must be positive, got T={num_frames}, J={num_joints}"
        )
    if len(frame_idx) > 0:
        if frame_idx.min() < 0 or frame_idx.max() >= num_frames:
            raise PoseValidationError(
                f"frame index out of bounds [0, {num_frames}) in entries"
            )
        if joint_idx.min() < 0 or joint_idx.max() >= num_joints:
            raise PoseValidationError(
                f"joint index out of bounds [0, {num_joints}) in entries"
            )
        keys = frame_idx * num_joints + joint_idx
        if len(np.unique(keys)) != len(keys):
            raise PoseValidationError("duplicate (frame, joint) entry")
        if not np.all(np.isfinite(coords)):
            raise PoseValidationError("non-finite coordinate in entries")
    return frame_idx, joint_idx, coords


@dataclass(frozen=True)
class Skeleton2DSequence:
    """Sparse per-frame 2D joint locations.

    Attributes:
        frame_idx: (N,) 0-based frame index per entry.
        joint_idx: (N,) 0-based joint index per entry.
        coords: (N, 2) pixel coordinates per entry, columns (x, y); x is the
            column and y the row. Coordinates may fall outside the frame.
        num_frames: timeline length T.
        num_joints: joint count J.
    """

    frame_idx: np.ndarray
    joint_idx: np.ndarray
    coords: np.ndarray
    num_frames: int
    num_joints: int

    dims = 2

    def __post_init__(self):
        f, j, c = _validate_entries(
            self.frame_idx, self.joint_idx, self.coords,
            self.num_frames, self.num_joints, self.dims,
        )
        object.__setattr__(self, "frame_idx", f)
        object.__setattr__(self, "joint_idx", j)
        object.__setattr__(self, "coords", c)

    def __len__(self) -> int:
        return len(self.frame_idx)

    def select_frames(self, indices) -> "Skeleton2DSequence":
        """New sequence whose frame i holds the entries of input frame indices[i]."""
        return _select_frames(self, indices)

    def with_joints(self, joint_perm) -> "Skeleton2DSequence":
        """Relabel joints: entry with joint j becomes joint_perm[j]."""
        perm = np.asarray(joint_perm, dtype=np.int64)
        return type(self)(self.frame_idx, perm[self.joint_idx], self.coords,
                          self.num_frames, self.num_joints)


@dataclass(frozen=True)
class Skeleton3DSequence(Skeleton2DSequence):
    """Like Skeleton2DSequence with an extra depth column: coords are (x, y, z)."""

    dims = 3

    def to_dense(self) -> np.ndarray:
        """Dense (T, J, 3) array; missing (frame, joint) entries are zero."""
        dense = np.zeros((self.num_frames, self.num_joints, 3), dtype=np.float64)
        dense[self.frame_idx, self.joint_idx] = self.coords
        return dense


def _select_frames(pose, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) < 1:
        raise ConfigError("frame index selection must be non-empty")
    if indices.min() < 0 or indices.max() >= pose.num_frames:
        raise ConfigError("frame index selection out of bounds")
    out_f, out_j, out_c = [], [], []
    for out_t, src_t in enumerate(indices):
        mask = pose.frame_idx == src_t
        out_f.append(np.full(mask.sum(), out_t, dtype=np.int64))
        out_j.append(pose.joint_idx[mask])
        out_c.append(pose.coords[mask])
    return type(pose)(
        np.concatenate(out_f), np.concatenate(out_j), np.concatenate(out_c),
        num_frames=len(indices), num_joints=pose.num_joints,
    )


@dataclass(frozen=True)
class LabeledSample:
    """A clip with optional 2D/3D skeleton sequences on the same timeline."""

    clip: VideoClip
    pose2d: Skeleton2DSequence | None = None
    pose3d: Skeleton3DSequence | None = None

    def __post_init__(self):
        for name, pose in (("pose2d", self.pose2d), ("pose3d", self.pose3d)):
            if pose is not None and pose.num_frames != self.clip.num_frames:
                raise DataError(
                    f"sample {self.clip.id}: {name} has {pose.num_frames} frames, "
                    f"clip has {self.clip.num_frames}"
                )


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the deterministic synthetic video+pose dataset.

    Class identity is carried by joint motion (static / linear / circular /
    oscillating trajectories), never by appearance: every class renders the
    same joint discs on the same background.
    """

    num_classes: int = 4
    clips_per_class: int = 8
    num_frames: int = 4
    height: int = 32
    width: int = 32
    num_joints: int = 5
    seed: int = 0
    motion_amplitude: float = 12.0
    render_radius: float = 2.5

    def __post_init__(self):
        for name in ("num_classes", "clips_per_class", "num_frames",
                     "height", "width", "num_joints"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.motion_amplitude < 0 or self.render_radius < 1:
            raise ConfigError("motion_amplitude must be >= 0 and render_radius >= 1 "
                              "(a disc must cover its own center pixel)")
        footprint = (2 * math.ceil(self.render_radius) + 1) ** 2
        if self.num_joints * footprint > self.height * self.width:
            raise ConfigError(
                f"{self.num_joints} discs of radius {self.render_radius} do not fit "
                f"a {self.height}x{self.width} frame"
            )


def joint_palette(num_joints: int) -> np.ndarray:
    """Fixed per-joint RGB colors (J, 3); shared by all classes."""
    hues = np.arange(num_joints) / max(num_joints, 1)
    return np.array([colorsys.hsv_to_rgb(h, 0.85, 1.0) for h in hues])


def _trajectory(pattern: int, start: np.ndarray, amp: float, num_frames: int,
                rng: np.random.Generator) -> np.ndarray:
    """Per-joint (T, 2) trajectory in (x, y) centered on `start`.

    Every pattern keeps the path within amp/2 of the start so a start
    sampled with that reserve never leaves the frame.
    """
    t = np.arange(num_frames, dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if pattern == 0:  # static
        return np.tile(start, (num_frames, 1))
    if pattern == 1:  # linear drift through the start point
        direction = rng.uniform(-1.0, 1.0, size=2)
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 1e-9 else np.array([1.0, 0.0])
        frac = t / max(num_frames - 1, 1) - 0.5
        return start[None, :] + amp * direction[None, :] * frac[:, None]
    if pattern == 2:  # circular orbit around the start point
        angles = phase + 2.0 * np.pi * t / num_frames
        return start[None, :] + 0.5 * amp * np.stack(
            [np.cos(angles), np.sin(angles)], axis=1
        )
    # oscillation along a random axis
    axis_angle = rng.uniform(0.0, np.pi)
    axis = np.array([np.cos(axis_angle), np.sin(axis_angle)])
    sway = 0.5 * amp * np.sin(phase + 2.0 * np.pi * t / num_frames)
    return start[None, :] + sway[:, None] * axis[None, :]


def _depth_track(label: int, joint: int, num_frames: int) -> np.ndarray:
    """Class-dependent depth pattern (T,), offset per joint."""
    t = np.arange(num_frames, dtype=np.float64) / max(num_frames - 1, 1)
    pattern = label % 4
    cycles = 1 + label // 4
    if pattern == 0:
        z = np.full(num_frames, 0.5)
    elif pattern == 1:
        z = 0.2 + 0.6 * t
    elif pattern == 2:
        z = 0.5 + 0.3 * np.cos(2.0 * np.pi * cycles * t)
    else:
        z = 0.5 + 0.3 * np.abs(np.sin(np.pi * cycles * t))
    return z + 0.05 * joint


def _render_frames(tracks: np.ndarray, spec: SyntheticSpec,
                   palette: np.ndarray) -> np.ndarray:
    """Draw joint discs; tracks is (T, J, 2) in (x, y). Overlaps keep the max."""
    frames = np.zeros((spec.num_frames, spec.height, spec.width, 3))
    ys = np.arange(spec.height, dtype=np.float64)
    xs = np.arange(spec.width, dtype=np.float64)
    r2 = spec.render_radius ** 2
    for t in range(spec.num_frames):
        for j in range(spec.num_joints):
            cx, cy = tracks[t, j]
            d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
            # quadratic falloff keeps the center at full color
            weight = np.clip(1.0 - d2 / (4.0 * r2), 0.0, 1.0)
            weight[d2 > r2] = np.clip(1.0 - d2[d2 > r2] / (2.0 * r2), 0.0, 0.4)
            disc = weight[:, :, None] * palette[j][None, None, :]
            np.maximum(frames[t], disc, out=frames[t])
    return frames


def generate_synthetic(spec: SyntheticSpec) -> list[LabeledSample]:
    """Deterministic dataset: equal specs (including seed) give bit-identical data."""
    palette = joint_palette(spec.num_joints)
    margin = math.ceil(spec.render_radius) + 1
    samples = []
    for label in range(spec.num_classes):
        pattern = label % 4
        amp = spec.motion_amplitude * (1.0 + 0.5 * (label // 4))
        for k in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.seed, label, k])
            tracks = np.empty((spec.num_frames, spec.num_joints, 2))
            reserve = margin + amp / 2.0
            for j in range(spec.num_joints):
                hi_x, hi_y = spec.width - 1 - reserve, spec.height - 1 - reserve
                if hi_x <= reserve or hi_y <= reserve:
                    # amplitude too large for the frame: start centered, clamp later
                    start = np.array([spec.width / 2.0, spec.height / 2.0])
                else:
                    start = np.array([rng.uniform(reserve, hi_x),
                                      rng.uniform(reserve, hi_y)])
                tracks[:, j, :] = _trajectory(pattern, start, amp, spec.num_frames, rng)
            tracks[..., 0] = np.clip(tracks[..., 0], margin, spec.width - 1 - margin)
            tracks[..., 1] = np.clip(tracks[..., 1], margin, spec.height - 1 - margin)

            frames = _render_frames(tracks, spec, palette)
            clip = VideoClip(id=f"c{label}_s{k:03d}", frames=frames, label=label)

            t_idx = np.repeat(np.arange(spec.num_frames), spec.num_joints)
            j_idx = np.tile(np.arange(spec.num_joints), spec.num_frames)
            xy = tracks.reshape(-1, 2)
            pose2d = Skeleton2DSequence(t_idx, j_idx, xy,
                                        spec.num_frames, spec.num_joints)
            z = np.stack(
                [_depth_track(label, j, spec.num_frames) for j in range(spec.num_joints)],
                axis=1,
            ).reshape(-1, 1)
            pose3d = Skeleton3DSequence(t_idx, j_idx, np.hstack([xy, z]),
                                        spec.num_frames, spec.num_joints)
            samples.append(LabeledSample(clip=clip, pose2d=pose2d, pose3d=pose3d))
    return samples


def resample_indices(num_frames: int, target: int) -> np.ndarray:
    """Uniform frame sampling: output frame i maps to input frame floor(i*T/target)."""
    if target < 1:
        raise ConfigError(f"target frame count must be >= 1, got {target}")
    i = np.arange(target, dtype=np.int64)
    return (i * num_frames) // target


def resample_clip(clip: VideoClip, target: int) -> VideoClip:
    """Uniformly resample a clip to `target` frames (identity when equal)."""
    idx = resample_indices(clip.num_frames, target)
    if target == clip.num_frames:
        return clip
    return VideoClip(id=clip.id, frames=clip.frames[idx], label=clip.label,
                     fps=clip.fps)


def resample_sample(sample: LabeledSample, target: int) -> LabeledSample:
    """Resample a clip and its pose sequences with the same frame index set."""
    if target == sample.clip.num_frames:
        return sample
    idx = resample_indices(sample.clip.num_frames, target)
    return LabeledSample(
        clip=VideoClip(id=sample.clip.id, frames=sample.clip.frames[idx],
                       label=sample.clip.label, fps=sample.clip.fps),
        pose2d=None if sample.pose2d is None else sample.pose2d.select_frames(idx),
        pose3d=None if sample.pose3d is None else sample.pose3d.select_frames(idx),
    )


# ---------------------------------------------------------------------------
# Pose files: line-delimited JSON, header first.
# ---------------------------------------------------------------------------

def load_pose_file(path, dims: int) -> Skeleton2DSequence | Skeleton3DSequence:
    """Parse a pose file; indices are converted from 1-based to 0-based here."""
    if dims not in (2, 3):
        raise ConfigError(f"dims must be 2 or 3, got {dims}")
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise PoseParseError(f"{path}: empty file")

    def parse_line(lineno, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise PoseParseError(f"{path}: line {lineno}: {exc.msg}") from exc

    header = parse_line(1, lines[0])
    for key in ("T", "J", "dims"):
        if key not in header:
            raise PoseParseError(f"{path}: line 1: header missing '{key}'")
    if header["dims"] != dims:
        raise PoseValidationError(
            f"{path}: file declares dims={header['dims']}, caller requested {dims}"
        )
    num_frames, num_joints = int(header["T"]), int(header["J"])

    frame_idx, joint_idx, coords = [], [], []
    fields = ("t", "j", "x", "y") + (("z",) if dims == 3 else ())
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = parse_line(lineno, text)
        missing = [f for f in fields if f not in rec]
        if missing:
            raise PoseParseError(f"{path}: line {lineno}: missing field(s) {missing}")
        t, j = int(rec["t"]), int(rec["j"])
        if not (1 <= t <= num_frames) or not (1 <= j <= num_joints):
            raise PoseValidationError(
                f"{path}: line {lineno}: index (t={t}, j={j}) outside "
                f"[1, {num_frames}] x [1, {num_joints}]"
            )
        frame_idx.append(t - 1)
        joint_idx.append(j - 1)
        coords.append([float(rec[f]) for f in fields[2:]])

    cls = Skeleton2DSequence if dims == 2 else Skeleton3DSequence
    seen = set()
    for t, j in zip(frame_idx, joint_idx):
        if (t, j) in seen:
            raise PoseValidationError(
                f"{path}: duplicate entry for (t={t + 1}, j={j + 1})"
            )
        seen.add((t, j))
    coords_arr = (np.array(coords, dtype=np.float64).reshape(-1, dims)
                  if coords else np.empty((0, dims)))
    return cls(np.array(frame_idx, dtype=np.int64),
               np.array(joint_idx, dtype=np.int64),
               coords_arr, num_frames, num_joints)


def save_pose_file(path, pose: Skeleton2DSequence) -> None:
    """Write a pose sequence with 1-based on-disk indices."""
    path = Path(path)
    lines = [json.dumps({"T": pose.num_frames, "J": pose.num_joints,
                         "dims": pose.dims}, sort_keys=True)]
    order = np.lexsort((pose.joint_idx, pose.frame_idx))
    for i in order:
        rec = {"t": int(pose.frame_idx[i]) + 1, "j": int(pose.joint_idx[i]) + 1,
               "x": float(pose.coords[i, 0]), "y": float(pose.coords[i, 1])}
        if pose.dims == 3:
            rec["z"] = float(pose.coords[i, 2])
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Dataset directories: per-sample tensors plus an index file.
# ---------------------------------------------------------------------------

def save_dataset(samples: list[LabeledSample], out_dir, *,
                 num_classes: int | None = None, meta: dict | None = None) -> Path:
    """Write frames as .npy, poses as pose files, and an index.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if num_classes is None:
        num_classes = max(s.clip.label for s in samples) + 1
    index = {"format": DATASET_FORMAT, "num_classes": num_classes,
             "meta": meta or {}, "samples": []}
    for sample in samples:
        sid = sample.clip.id
        np.save(out_dir / f"{sid}.npy", sample.clip.frames)
        entry = {"id": sid, "label": sample.clip.label, "fps": sample.clip.fps,
                 "frames": f"{sid}.npy", "pose2d": None, "pose3d": None}
        if sample.pose2d is not None:
            entry["pose2d"] = f"{sid}_pose2d.jsonl"
            save_pose_file(out_dir / entry["pose2d"], sample.pose2d)
        if sample.pose3d is not None:
            entry["pose3d"] = f"{sid}_pose3d.jsonl"
            save_pose_file(out_dir / entry["pose3d"], sample.pose3d)
        index["samples"].append(entry)
    (out_dir / "index.json").write_text(
        json.dumps(index, sort_keys=True, indent=1) + "\n"
    )
    return out_dir


def load_dataset(data_dir) -> tuple[list[LabeledSample], dict]:
    """Load a dataset directory. Missing pose files load as None."""
    data_dir = Path(data_dir)
    index_path = data_dir / "index.json"
    if not index_path.exists():
        raise DataError(f"no index.json under {data_dir}")
    index = json.loads(index_path.read_text())
    if index.get("format") != DATASET_FORMAT:
        raise DataError(f"unsupported dataset format {index.get('format')!r}")
    samples = []
    for entry in index["samples"]:
        frames = np.load(data_dir / entry["frames"])
        clip = VideoClip(id=entry["id"], frames=frames, label=int(entry["label"]),
                         fps=float(entry.get("fps", 30.0)))
        pose2d = pose3d = None
        if entry.get("pose2d") and (data_dir / entry["pose2d"]).exists():
            pose2d = load_pose_file(data_dir / entry["pose2d"], dims=2)
        if entry.get("pose3d") and (data_dir / entry["pose3d"]).exists():
            pose3d = load_pose_file(data_dir / entry["pose3d"], dims=3)
        samples.append(LabeledSample(clip=clip, pose2d=pose2d, pose3d=pose3d))
    meta = {k: v for k, v in index.items() if k != "samples"}
    return samples, meta
