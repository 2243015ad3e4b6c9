"""Metrics and downstream applications of enriched poses."""

from .downstream import (
    ACTIVITY_MODES,
    REFINE_MODES,
    ActivitySet,
    EnrichedSet,
    MissingInputError,
    activity_downstream,
    build_activity_windows,
    flip_joint_types,
    refine_downstream,
)
from .metrics import MetricReport, descriptor_report, joint_errors, mae, mpjpe, pck05, pose_report, smape, wmape

__all__ = [
    "ACTIVITY_MODES", "REFINE_MODES", "ActivitySet", "EnrichedSet", "MissingInputError", "activity_downstream",
    "build_activity_windows", "flip_joint_types", "refine_downstream", "MetricReport", "descriptor_report",
    "joint_errors", "mae", "mpjpe", "pck05", "pose_report", "smape", "wmape",
]
