"""Binary joint maps: pixel-level occupancy and its token-level max-pooling.

Joint coordinates are discretized exactly once, here, by flooring; entries
that land outside the frame are dropped (they contribute zeros, they are not
clamped to the border).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .data import Skeleton2DSequence, Skeleton3DSequence
from .errors import ConfigError, ContractError

if TYPE_CHECKING:
    from .backbone import PatchConfig

MAP_CACHE_FORMAT = "skelvit.mapcache/1"
_CACHE_MAGIC = b"SVMC"
_VARIANT_CODES = {"full": 0, "flat": 1}

VARIANTS = ("full", "flat", "depth")


@dataclass(frozen=True)
class PixelJointMap:
    """Binary (T, H, W, J) map: 1 where a joint's floored location sits."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8)
        if b.ndim != 4:
            raise ContractError(f"pixel map must be 4-D (T,H,W,J), got {b.shape}")
        object.__setattr__(self, "bits", b)


@dataclass(frozen=True)
class TokenJointMap:
    """Binary (T_v, S_v, J) token map; flat variant collapses J to 1.

    For the depth variant, `depth` holds one value per (token, joint) slot;
    it is meaningful only where bits == 1 (zero elsewhere).
    """

    bits: np.ndarray
    variant: str = "full"
    depth: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8)
        if b.ndim != 3:
            raise ContractError(f"token map must be 3-D (T_v,S_v,J), got {b.shape}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown map variant {self.variant!r}")
        if self.variant == "flat" and b.shape[2] != 1:
            raise ContractError("flat variant must have a single joint channel")
        if self.variant == "depth":
            if self.depth is None or np.asarray(self.depth).shape != b.shape:
                raise ContractError("depth variant requires depth values shaped like bits")
            object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float64))
        object.__setattr__(self, "bits", b)

    @property
    def num_joint_channels(self) -> int:
        return self.bits.shape[2]


def _floored_in_frame(pose: Skeleton2DSequence, height: int, width: int):
    """Floor coordinates, keep only entries inside the frame."""
    cols = np.floor(pose.coords[:, 0]).astype(np.int64)
    rows = np.floor(pose.coords[:, 1]).astype(np.int64)
    keep = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    return pose.frame_idx[keep], pose.joint_idx[keep], rows[keep], cols[keep], keep


def build_pixel_map(pose: Skeleton2DSequence, height: int, width: int) -> PixelJointMap:
    """Pixel-level presence map for a pose sequence."""
    bits = np.zeros((pose.num_frames, height, width, pose.num_joints), dtype=np.uint8)
    t, j, rows, cols, _ = _floored_in_frame(pose, height, width)
    bits[t, rows, cols, j] = 1
    return PixelJointMap(bits)


def pool_token_map(pixel_map: PixelJointMap, cfg: "PatchConfig") -> TokenJointMap:
    """Max-pool the pixel map with the tokenizer's patch_time x p x p windows.

    Spatial token index follows the backbone's token ordering (grid
    row-major); edge windows are the zero-padded ceilings.
    """
    bits = pixel_map.bits
    t, h, w, j = bits.shape
    tau, p = cfg.patch_time, cfg.patch_size
    t_v = -(-t // tau)
    gr, gc = -(-h // p), -(-w // p)
    padded = np.zeros((t_v * tau, gr * p, gc * p, j), dtype=np.uint8)
    padded[:t, :h, :w] = bits
    pooled = padded.reshape(t_v, tau, gr, p, gc, p, j).max(axis=(1, 3, 5))
    return TokenJointMap(pooled.reshape(t_v, gr * gc, j), variant="full")


def make_variant(full_map: TokenJointMap, variant: str,
                 pose3d: Skeleton3DSequence | None = None,
                 cfg: "PatchConfig | None" = None) -> TokenJointMap:
    """Derive the flat or depth variant from a full token map.

    flat: OR over the joint axis into a single channel.
    depth: bits unchanged; each set slot carries the depth of the entry that
    set it, the minimum (nearest) z when several entries share a window.
    """
    if full_map.variant != "full":
        raise ContractError("variants are derived from the full map")
    if variant == "full":
        return full_map
    if variant == "flat":
        return TokenJointMap(full_map.bits.max(axis=2, keepdims=True), variant="flat")
    if variant != "depth":
        raise ConfigError(f"unknown map variant {variant!r}")
    if pose3d is None:
        raise ConfigError("depth variant requires a 3D pose sequence")
    if cfg is None:
        raise ConfigError("depth variant requires the patch config")

    t, jn, rows, cols, keep = _floored_in_frame(pose3d, cfg.height, cfg.width)
    z = pose3d.coords[keep, 2]
    depth = np.zeros_like(full_map.bits, dtype=np.float64)
    filled = np.zeros_like(full_map.bits, dtype=bool)
    t_tok = t // cfg.patch_time
    s_tok = (rows // cfg.patch_size) * cfg.grid_cols + (cols // cfg.patch_size)
    for tt, ss, jj, zz in zip(t_tok, s_tok, jn, z):
        if not filled[tt, ss, jj] or zz < depth[tt, ss, jj]:
            depth[tt, ss, jj] = zz
            filled[tt, ss, jj] = True
    return TokenJointMap(full_map.bits, variant="depth", depth=depth)


def add_pixel_noise(pose: Skeleton2DSequence, level: float,
                    seed: int) -> Skeleton2DSequence:
    """Add per-entry uniform [0, level] offsets to x and y independently.

    A level of 0 is a bit-exact no-op (the input object is returned).
    """
    if level < 0:
        raise ConfigError(f"noise level must be >= 0, got {level}")
    if level == 0 or len(pose) == 0:
        return pose
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(0.0, level, size=(len(pose), 2))
    coords = pose.coords.copy()
    coords[:, :2] = coords[:, :2] + offsets
    return type(pose)(pose.frame_idx, pose.joint_idx, coords,
                      pose.num_frames, pose.num_joints)


def token_map_iou(a: TokenJointMap, b: TokenJointMap) -> float:
    """Bitwise intersection-over-union; 1.0 when both maps are empty."""
    if a.bits.shape != b.bits.shape:
        raise ContractError(f"map shapes differ: {a.bits.shape} vs {b.bits.shape}")
    inter = int(np.sum((a.bits == 1) & (b.bits == 1)))
    union = int(np.sum((a.bits == 1) | (b.bits == 1)))
    return 1.0 if union == 0 else inter / union


# ---------------------------------------------------------------------------
# Cached-map file: fixed header + bit-packed payload, row-major in (t, s, j).
# ---------------------------------------------------------------------------

def write_map_cache(path, token_map: TokenJointMap) -> None:
    if token_map.variant not in _VARIANT_CODES:
        raise ConfigError(f"{token_map.variant!r} maps are not cacheable "
                          "(payload is bit-packed)")
    t_v, s_v, j = token_map.bits.shape
    header = _CACHE_MAGIC + struct.pack(
        "<HIIIB", 1, t_v, s_v, j, _VARIANT_CODES[token_map.variant]
    )
    payload = np.packbits(token_map.bits.reshape(-1)).tobytes()
    Path(path).write_bytes(header + payload)


def read_map_cache(path) -> TokenJointMap:
    raw = Path(path).read_bytes()
    if raw[:4] != _CACHE_MAGIC:
        raise ContractError(f"{path}: not a map cache file")
    version, t_v, s_v, j, code = struct.unpack("<HIIIB", raw[4:4 + 15])
    if version != 1:
        raise ContractError(f"{path}: unsupported map cache version {version}")
    variant = {v: k for k, v in _VARIANT_CODES.items()}[code]
    n = t_v * s_v * j
    bits = np.unpackbits(np.frombuffer(raw[19:], dtype=np.uint8), count=n)
    return TokenJointMap(bits.reshape(t_v, s_v, j), variant=variant)
