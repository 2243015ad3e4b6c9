from .dataset import SPLIT_SCALES, SimulationConfig, WindowSet, make_windows, simulate_records
from .estimators import (
    KINDS,
    EstimatorSpec,
    MissingTrainingDataError,
    PoseEstimator,
    WindowLengthError,
    estimate,
    make_estimator,
    pack_windows,
)
from .motion import ACTIVITIES, FPS, SKELETON, MotionClip, Skeleton, UnknownActivityError, pose_from_angles, synth_motion
from .radar import RadarConfig, lower_body_point_count, render_clip, render_frame

__all__ = [
    "ACTIVITIES",
    "FPS",
    "KINDS",
    "SKELETON",
    "SPLIT_SCALES",
    "EstimatorSpec",
    "MissingTrainingDataError",
    "MotionClip",
    "PoseEstimator",
    "RadarConfig",
    "SimulationConfig",
    "Skeleton",
    "UnknownActivityError",
    "WindowLengthError",
    "WindowSet",
    "estimate",
    "lower_body_point_count",
    "make_estimator",
    "make_windows",
    "pack_windows",
    "pose_from_angles",
    "render_clip",
    "render_frame",
    "simulate_records",
    "synth_motion",
]
