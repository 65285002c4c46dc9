"""Coarse-to-fine structure from motion with sensor-aided global priors."""

from .geometry import (
    Camera,
    Pose,
    Sim3Transform,
    angular_distance,
    chordal_distance,
    project,
    relative_pose,
    sim3_apply,
    sim3_compose,
    sim3_inverse,
    so3_exp,
    so3_log,
)
from .align_merge import (
    AlignmentOutcome,
    MergeResult,
    adaptive_align,
    estimate_sim3_ransac,
    fit_similarity,
    merge_reconstructions,
)
from .scene import GlobalPoses, Reconstruction, SensorPrior, Track, TwoViewEdge, ViewGraph

__version__ = "0.1.0"
