"""Video transformer training with removable skeleton-guided auxiliary heads.

During training, two side branches refine the backbone's token
representations: one predicts which 2D joints each token's patch contains,
the other regresses pooled features from a frozen 3D skeleton encoder. Both
are dropped at inference, so the deployed model is a plain video transformer
that needs no poses.
"""

__version__ = "0.1.0"

from .backbone import BackboneOutput, PatchConfig, TokenTensor, VideoTransformer
from .data import (LabeledSample, Skeleton2DSequence, Skeleton3DSequence,
                   SyntheticSpec, VideoClip, generate_synthetic, load_pose_file,
                   resample_clip)
from .jointmap import PixelJointMap, TokenJointMap, build_pixel_map, pool_token_map
from .trainer import FusionConfig, LossBundle, TrainableModel, TrainConfig

__all__ = [
    "BackboneOutput", "FusionConfig", "LabeledSample", "LossBundle",
    "PatchConfig", "PixelJointMap", "Skeleton2DSequence", "Skeleton3DSequence",
    "SyntheticSpec", "TokenJointMap", "TokenTensor", "TrainConfig",
    "TrainableModel", "VideoClip", "VideoTransformer", "build_pixel_map",
    "generate_synthetic", "load_pose_file", "pool_token_map", "resample_clip",
    "__version__",
]
