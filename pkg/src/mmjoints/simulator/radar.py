"""Sparse reflection renderer with region-biased dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import LOWER_BODY, PointCloudFrame
from .motion import SKELETON, Skeleton

# surface radius (cm) per bone, keyed by child joint name
BODY_RADIUS = {
    "r_hip": 6.0, "l_hip": 6.0, "r_knee": 7.0, "l_knee": 7.0, "r_ankle": 5.0, "l_ankle": 5.0,
    "spine": 11.0, "thorax": 11.0, "neck": 5.0, "head": 9.0,
    "l_shoulder": 5.0, "r_shoulder": 5.0, "l_elbow": 4.5, "r_elbow": 4.5, "l_wrist": 4.0, "r_wrist": 4.0,
}


@dataclass(frozen=True)
class RadarConfig:
    """Radar placement and reflection model.

    Parameters
    ----------
    position : tuple
        Radar location in cm.
    budget : int
        Maximum points kept per frame.
    intensity_constant : float
        Intensity is ``intensity_constant / r**2`` with ``r`` the radar distance.
    noise_std : float
        Gaussian position noise in cm.
    dropout_lower, dropout_upper : float
        Per-point drop probability for lower-body and upper-body bones.
    spacing : float
        Nominal distance between candidate reflection points along a bone.
    """

    position: tuple = (0.0, 0.0, 100.0)
    budget: int = 64
    intensity_constant: float = 300.0**2
    noise_std: float = 2.0
    dropout_lower: float = 0.7
    dropout_upper: float = 0.1
    spacing: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("dropout_lower", "dropout_upper"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.intensity_constant <= 0 or self.noise_std < 0 or self.spacing <= 0:
            raise ValueError("intensity_constant and spacing must be > 0, noise_std >= 0")
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))


def _candidate_layout(skeleton: Skeleton, spacing: float):
    """Bone index per candidate point; counts follow nominal bone lengths so the
    random draws consumed per frame do not depend on the pose geometry."""
    bones = skeleton.bones
    counts = [max(1, int(round(skeleton.length(c) / spacing))) for _, c in bones]
    bone_of = np.repeat(np.arange(len(bones)), counts)
    return bones, bone_of


def render_frame(pose, radar: RadarConfig, rng, velocities=None, skeleton: Skeleton = SKELETON,
                 frame_id=0, timestamp=0.0) -> PointCloudFrame:
    """Sample reflections along the bones of ``pose`` ``(J, 3)``.

    Each candidate sits on the radar-facing surface of its bone, carries
    ``intensity_constant / r**2`` computed at the bone axis, radial-velocity
    Doppler when ``velocities`` ``(J, 3)`` are given, Gaussian position noise,
    and is then dropped with its region's probability. Survivors beyond the
    budget are subsampled uniformly.
    """
    pose = np.asarray(pose, dtype=float)
    radar_pos = np.asarray(radar.position)
    bones, bone_of = _candidate_layout(skeleton, radar.spacing)
    n = bone_of.size
    parent = np.array([b[0] for b in bones])[bone_of]
    child = np.array([b[1] for b in bones])[bone_of]

    t = rng.uniform(0.0, 1.0, n)
    theta = rng.uniform(0.0, 2 * np.pi, n)
    noise = rng.standard_normal((n, 3)) * radar.noise_std
    keep_u = rng.uniform(0.0, 1.0, n)

    a, b = pose[parent], pose[child]
    axis_pts = a + t[:, None] * (b - a)
    seg = b - a
    seg_len = np.linalg.norm(seg, axis=1, keepdims=True)
    u = np.where(seg_len > 1e-9, seg / np.maximum(seg_len, 1e-9), np.array([0.0, 0.0, 1.0]))
    ref = np.where(np.abs(u[:, 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    normal = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    to_radar = radar_pos - axis_pts
    normal = np.where(np.sum(normal * to_radar, axis=1, keepdims=True) < 0, -normal, normal)
    radius = np.array([BODY_RADIUS[skeleton.names[c]] for c in child])
    surface = axis_pts + radius[:, None] * normal

    r2 = np.sum((axis_pts - radar_pos) ** 2, axis=1)
    intensity = radar.intensity_constant / np.maximum(r2, 1e-9)
    if velocities is not None:
        v = np.asarray(velocities, dtype=float)
        vel = v[parent] + t[:, None] * (v[child] - v[parent])
        los = (axis_pts - radar_pos) / np.sqrt(np.maximum(r2, 1e-18))[:, None]
        doppler = np.sum(vel * los, axis=1)
    else:
        doppler = np.zeros(n)

    lower = np.isin(child, LOWER_BODY)
    drop_p = np.where(lower, radar.dropout_lower, radar.dropout_upper)
    keep = keep_u >= drop_p
    idx = np.flatnonzero(keep)
    if idx.size > radar.budget:
        idx = np.sort(rng.choice(idx, size=radar.budget, replace=False))
    pts = np.column_stack([surface[idx] + noise[idx], intensity[idx], doppler[idx]])
    return PointCloudFrame(pts, frame_id=frame_id, timestamp=timestamp)


def render_clip(clip, radar: RadarConfig, seed: int):
    """Render every frame of a clip with a single seeded stream."""
    rng = np.random.default_rng(seed)
    vel = clip.velocities
    return [
        render_frame(clip.frames[i], radar, rng, vel[i], frame_id=i, timestamp=i / clip.fps)
        for i in range(len(clip))
    ]


def lower_body_point_count(points, z_threshold: float = 85.0) -> int:
    """Points below ``z_threshold`` cm; the only region cue an estimator can see."""
    pts = np.asarray(points, dtype=float).reshape(-1, 5)
    return int(np.sum(pts[:, 2] < z_threshold))
