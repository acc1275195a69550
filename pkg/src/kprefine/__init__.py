"""Descriptor-guided sub-pixel keypoint refinement trained with an epipolar objective."""

__version__ = "0.1.0"

from .estimators import EssentialMatrixRansac, KeypointRefiner
from .geometry import (
    CameraIntrinsics,
    RelativePose,
    auc,
    decompose_essential,
    epipolar_distance,
    epipolar_error,
    epipolar_loss,
    essential_from_pose,
    normalize_point,
    normalized_threshold,
    pose_error,
)
from .refine import NetworkWeights, RefineConfig, Variant
from .synthetic import SceneConfig, generate_dataset, load_dataset, make_dataset
from .trainer import TrainConfig, train

__all__ = [
    "CameraIntrinsics",
    "EssentialMatrixRansac",
    "KeypointRefiner",
    "NetworkWeights",
    "RefineConfig",
    "RelativePose",
    "SceneConfig",
    "TrainConfig",
    "Variant",
    "auc",
    "decompose_essential",
    "epipolar_distance",
    "epipolar_error",
    "epipolar_loss",
    "essential_from_pose",
    "generate_dataset",
    "load_dataset",
    "make_dataset",
    "normalize_point",
    "normalized_threshold",
    "pose_error",
    "train",
]
