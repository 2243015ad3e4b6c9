"""Geometric and sensor types plus the closed-form joint descriptor math.

Joint order follows ``JOINT_NAMES``; every pose array in the package is
``(..., 17, 3)`` in centimetres, x lateral (subject's left is +x when facing
the radar), y depth away from the radar, z up.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

JOINT_NAMES = (
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
)
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
N_JOINTS = len(JOINT_NAMES)
LOWER_BODY = (0, 1, 2, 3, 4, 5, 6)
UPPER_BODY = tuple(j for j in range(N_JOINTS) if j not in LOWER_BODY)


@dataclass(frozen=True)
class Pose:
    """Ordered joint positions, shape ``(J, 3)`` in cm."""

    joints: np.ndarray

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=float)
        if joints.ndim != 2 or joints.shape[1] != 3:
            raise ValueError(f"pose must have shape (J, 3), got {joints.shape}")
        if not np.all(np.isfinite(joints)):
            raise ValueError("pose coordinates must be finite")
        object.__setattr__(self, "joints", joints)

    @property
    def J(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class PointCloudFrame:
    """One radar frame.

    ``points`` has shape ``(N, 5)`` with columns x, y, z (cm), intensity and
    Doppler (cm/s). ``N`` may be zero.
    """

    points: np.ndarray
    frame_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 5)
        if np.any(pts[:, 3] < 0):
            raise ValueError("point intensities must be non-negative")
        object.__setattr__(self, "points", pts)

    @property
    def positions(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensities(self) -> np.ndarray:
        return self.points[:, 3]

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class DatasetStats:
    psi_bar: float = 0.0
    torso_bar: float = 20.0
    d_min: float = 5.0
    d_ref: float = 10.0

    def __post_init__(self):
        if self.psi_bar < 0:
            raise ValueError("psi_bar must be >= 0")
        if self.torso_bar <= 0:
            raise ValueError("torso_bar must be > 0")
        if self.d_min <= 0 or self.d_ref <= 0:
            raise ValueError("d_min and d_ref must be > 0")


@dataclass(frozen=True)
class JointDescriptor:
    xi: float
    kappa: float

    def __post_init__(self):
        if not 0.0 <= self.xi < 1.0:
            raise ValueError(f"xi out of [0, 1): {self.xi}")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa out of (0, 1]: {self.kappa}")


@dataclass(frozen=True)
class EnrichedPose:
    """Estimator output with per-joint ``(xi, kappa)`` appended: ``(J, 5)``."""

    joints: np.ndarray
    frame_id: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_parts(cls, positions, xi, kappa, frame_id=0, **meta):
        positions = np.asarray(positions, dtype=float)
        xi = np.asarray(xi, dtype=float).reshape(-1, 1)
        kappa = np.asarray(kappa, dtype=float).reshape(-1, 1)
        return cls(np.hstack([positions, xi, kappa]), frame_id, dict(meta))

    @property
    def positions(self) -> np.ndarray:
        return self.joints[:, :3]

    @property
    def xi(self) -> np.ndarray:
        return self.joints[:, 3]

    @property
    def kappa(self) -> np.ndarray:
        return self.joints[:, 4]


class JointType(enum.Enum):
    CORRECT_NOT_SENSED = "Correct/Not Sensed"
    CORRECT_SENSED = "Correct/Sensed"
    INCORRECT_NOT_SENSED = "Incorrect/Not Sensed"
    INCORRECT_SENSED = "Incorrect/Sensed"


# table column order: Correct/Incorrect x Not Sensed/Sensed
TABLE_ORDER = (
    JointType.CORRECT_NOT_SENSED,
    JointType.CORRECT_SENSED,
    JointType.INCORRECT_NOT_SENSED,
    JointType.INCORRECT_SENSED,
)


def _points_of(frame) -> np.ndarray:
    if isinstance(frame, PointCloudFrame):
        return frame.points
    return np.asarray(frame, dtype=float).reshape(-1, 5)


def signal_strength(joint_position, frame, stats: DatasetStats) -> float:
    """Clamped inverse-square intensity sum of a frame around one joint.

    Each point contributes ``I * (d_ref / max(d, d_min))**2``.
    """
    pts = _points_of(frame)
    if pts.shape[0] == 0:
        return 0.0
    d = np.linalg.norm(pts[:, :3] - np.asarray(joint_position, dtype=float), axis=1)
    w = (stats.d_ref / np.maximum(d, stats.d_min)) ** 2
    return float(np.sum(pts[:, 3] * w))


def signal_strengths(joints, points, stats: DatasetStats) -> np.ndarray:
    """Vectorised :func:`signal_strength` for all joints of one pose."""
    joints = np.asarray(joints, dtype=float).reshape(-1, 3)
    pts = _points_of(points)
    if pts.shape[0] == 0:
        return np.zeros(joints.shape[0])
    d = np.linalg.norm(joints[:, None, :] - pts[None, :, :3], axis=2)
    w = (stats.d_ref / np.maximum(d, stats.d_min)) ** 2
    return w @ pts[:, 3]


def sensing_score(psi, stats: DatasetStats):
    """``sigmoid(psi - psi_bar)``; accepts scalars or arrays."""
    out = expit(np.asarray(psi, dtype=float) - stats.psi_bar)
    return float(out) if np.ndim(out) == 0 else out


def reliability_score(distance, stats: DatasetStats):
    """Normalised sigmoid of the joint error: 1 at zero distance, -> 0 far away."""
    distance = np.asarray(distance, dtype=float)
    if np.any(distance < 0):
        raise ValueError("distance must be non-negative")
    # expit(-x) is 1 - expit(x) without cancellation for large distances
    f = expit(0.5 * stats.torso_bar - distance)
    out = f / expit(0.5 * stats.torso_bar)
    return float(out) if np.ndim(out) == 0 else out


def classify_joint(psi: float, distance: float, stats: DatasetStats) -> JointType:
    if distance < 0:
        raise ValueError("distance must be non-negative")
    sensed = psi >= stats.psi_bar
    correct = distance <= 0.5 * stats.torso_bar
    if correct:
        return JointType.CORRECT_SENSED if sensed else JointType.CORRECT_NOT_SENSED
    return JointType.INCORRECT_SENSED if sensed else JointType.INCORRECT_NOT_SENSED


def tabulate_joint_types(records, stats: DatasetStats) -> dict:
    """Count joint types over ``(psi, distance)`` records, in table column order."""
    counts = Counter(classify_joint(p, d, stats) for p, d in records)
    return {jt: counts.get(jt, 0) for jt in TABLE_ORDER}


def format_joint_type_table(rows: dict) -> str:
    """Render ``{row label: counts}`` as a Correct/Incorrect x Not Sensed/Sensed table."""
    header = ["Model", "Correct/Not Sensed", "Correct/Sensed", "Incorrect/Not Sensed", "Incorrect/Sensed"]
    lines = ["\t".join(header)]
    for label, counts in rows.items():
        lines.append("\t".join([label] + [str(counts[jt]) for jt in TABLE_ORDER]))
    return "\n".join(lines) + "\n"


def descriptor_targets(pred, gt, points, stats: DatasetStats):
    """Ground-truth ``(xi, kappa)`` per joint for one frame.

    ``xi`` measures the signal support around the estimated joint, ``kappa``
    comes from the estimated-to-ground-truth distance.
    """
    psi = signal_strengths(pred, points, stats)
    dist = np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1)
    return sensing_score(psi, stats), reliability_score(dist, stats), psi, dist
