"""Pose estimation from non-coplanar tag bundles, with a seeded docking and swarm simulator."""

from .estimation import (
    BundleEstimate,
    Detection,
    EstimationFailed,
    FilterWindow,
    WeightedPose,
    estimate_bundle,
    estimate_leader_only,
    estimate_single_tag,
    fuse,
)
from .geometry import (
    DEFAULT_INTRINSICS,
    BundleGeometry,
    CameraIntrinsics,
    PlanarPose,
    Pose6D,
    TagPlacement,
    build_bundle,
    project,
    tag_corners_bundle_frame,
    to_planar,
    view_angle,
)
from .simulator import NoiseProfile, ReflectionEvent, detection_rate, simulate_frame

__version__ = "0.1.0"

__all__ = [
    "build_bundle",
    "BundleEstimate",
    "BundleGeometry",
    "CameraIntrinsics",
    "DEFAULT_INTRINSICS",
    "Detection",
    "detection_rate",
    "estimate_bundle",
    "estimate_leader_only",
    "estimate_single_tag",
    "EstimationFailed",
    "FilterWindow",
    "fuse",
    "NoiseProfile",
    "PlanarPose",
    "Pose6D",
    "project",
    "ReflectionEvent",
    "simulate_frame",
    "tag_corners_bundle_frame",
    "TagPlacement",
    "to_planar",
    "view_angle",
    "WeightedPose",
]
