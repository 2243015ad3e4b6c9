"""Kinematic skeleton and parametric activity trajectories.

Poses are built from a handful of joint angles by forward kinematics in a body
frame (x to the subject's left, -y forward, z up) and then placed in the scene
facing the radar at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import JOINT_NAMES, N_JOINTS, PARENTS

FPS = 10.0

ACTIVITIES = (
    "lateral_raise_left",
    "lateral_raise_right",
    "lateral_raise_both",
    "bicep_curl_left",
    "bicep_curl_right",
    "bicep_curl_both",
    "half_squat",
    "kick_left",
    "kick_right",
)

# nominal bone lengths in cm, keyed by child joint
BONE_LENGTHS = {
    "r_hip": 12.0,
    "r_knee": 45.0,
    "r_ankle": 43.0,
    "l_hip": 12.0,
    "l_knee": 45.0,
    "l_ankle": 43.0,
    "spine": 25.0,
    "thorax": 25.0,
    "neck": 15.0,
    "head": 12.0,
    "l_shoulder": 18.0,
    "l_elbow": 30.0,
    "l_wrist": 27.0,
    "r_shoulder": 18.0,
    "r_elbow": 30.0,
    "r_wrist": 27.0,
}
ANKLE_HEIGHT = 7.0
TORSO_DIAMETER = 20.0


class UnknownActivityError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    names: tuple = JOINT_NAMES
    parents: tuple = PARENTS
    bone_lengths: dict = field(default_factory=lambda: dict(BONE_LENGTHS))
    torso_diameter: float = TORSO_DIAMETER

    def __post_init__(self):
        if len(self.names) != len(self.parents):
            raise ValueError("names and parents must align")
        for j, p in enumerate(self.parents):
            if (j == 0) != (p == -1) or p >= j:
                raise ValueError("parents must form a tree rooted at joint 0 with parents listed first")
        if any(v <= 0 for v in self.bone_lengths.values()):
            raise ValueError("bone lengths must be positive")

    @property
    def bones(self):
        """``(parent, child)`` index pairs."""
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]

    def length(self, child: int) -> float:
        return self.bone_lengths[self.names[child]]


SKELETON = Skeleton()


def _unit(v):
    return v / np.linalg.norm(v)


def _forearm_direction(upper, elbow):
    fwd = np.array([0.0, -1.0, 0.0])
    w = fwd - (fwd @ upper) * upper
    if np.linalg.norm(w) < 1e-6:
        w = np.array([0.0, 0.0, 1.0]) - upper[2] * upper
    w = _unit(w)
    return np.cos(elbow) * upper + np.sin(elbow) * w


def pose_from_angles(angles: dict, scale=1.0, skeleton: Skeleton = SKELETON) -> np.ndarray:
    """Forward kinematics in the body frame with the feet on the floor (z = 0).

    ``angles`` keys (radians, default 0): ``abd_l/abd_r`` arm abduction,
    ``flex_l/flex_r`` arm forward flexion, ``elbow_l/elbow_r``, ``hip_l/hip_r``
    forward hip flexion, ``knee_l/knee_r``, ``lean`` forward trunk lean and
    ``squat`` (thigh angle with the knees at twice that and the pelvis lowered).
    """
    a = {k: float(angles.get(k, 0.0)) for k in (
        "abd_l", "abd_r", "flex_l", "flex_r", "elbow_l", "elbow_r",
        "hip_l", "hip_r", "knee_l", "knee_r", "lean", "squat",
    )}
    L = {k: v * scale for k, v in skeleton.bone_lengths.items()}
    J = np.zeros((N_JOINTS, 3))
    sq = a["squat"]
    thigh, shin = L["l_knee"], L["l_ankle"]
    pelvis_z = (thigh + shin) * np.cos(sq) + ANKLE_HEIGHT * scale
    # squatting lowers the pelvis so the feet stay on the floor
    J[0] = (0.0, 0.0, pelvis_z)

    def leg(hip_idx, side, hip_angle, knee_angle):
        J[hip_idx] = J[0] + (side * L["l_hip"], 0.0, 0.0)
        h = hip_angle + sq
        k = knee_angle + 2 * sq
        J[hip_idx + 1] = J[hip_idx] + thigh * np.array([0.0, -np.sin(h), -np.cos(h)])
        J[hip_idx + 2] = J[hip_idx + 1] + shin * np.array([0.0, -np.sin(h - k), -np.cos(h - k)])

    leg(1, -1.0, a["hip_r"], a["knee_r"])
    leg(4, 1.0, a["hip_l"], a["knee_l"])

    trunk = np.array([0.0, -np.sin(a["lean"]), np.cos(a["lean"])])
    J[7] = J[0] + L["spine"] * trunk
    J[8] = J[7] + L["thorax"] * trunk
    J[9] = J[8] + L["neck"] * trunk
    J[10] = J[9] + L["head"] * trunk

    def arm(sh_idx, side, abd, flex, elbow):
        J[sh_idx] = J[8] + (side * L["l_shoulder"], 0.0, 0.0)
        upper = np.array([side * np.sin(abd) * np.cos(flex), -np.sin(flex), -np.cos(abd) * np.cos(flex)])
        J[sh_idx + 1] = J[sh_idx] + L["l_elbow"] * upper
        J[sh_idx + 2] = J[sh_idx + 1] + L["l_wrist"] * _forearm_direction(upper, elbow)

    arm(11, 1.0, a["abd_l"], a["flex_l"], a["elbow_l"])
    arm(14, -1.0, a["abd_r"], a["flex_r"], a["elbow_r"])
    return J


def _place(body, position, yaw):
    """Rotate about z by ``yaw`` and translate the body frame into the scene."""
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return body @ R.T + np.asarray(position, dtype=float)


def activity_angles(activity: str, phase, amplitude: float, jitter: dict) -> dict:
    """Joint angles for ``phase`` in [0, 1] (0 = rest, 1 = peak of the movement)."""
    if activity not in ACTIVITIES:
        raise UnknownActivityError(f"unknown activity {activity!r}; expected one of {ACTIVITIES}")
    d = np.deg2rad
    p = phase * amplitude
    g = jitter.get("gain", 1.0)
    out = {"elbow_l": d(8), "elbow_r": d(8), "abd_l": d(6), "abd_r": d(6)}
    if activity.startswith("lateral_raise"):
        side = activity.rsplit("_", 1)[1]
        for s in ("l", "r"):
            if side in ("both", {"l": "left", "r": "right"}[s]):
                out[f"abd_{s}"] = d(6) + d(84) * g * p
    elif activity.startswith("bicep_curl"):
        side = activity.rsplit("_", 1)[1]
        for s in ("l", "r"):
            if side in ("both", {"l": "left", "r": "right"}[s]):
                out[f"elbow_{s}"] = d(8) + d(122) * g * p
                out[f"flex_{s}"] = d(10) * p
    elif activity == "half_squat":
        out["squat"] = d(45) * g * p
        out["lean"] = d(22) * p
        out["flex_l"] = out["flex_r"] = d(80) * p
    else:  # kicks, with a counter-swing of the arms
        s, o = ("l", "r") if activity == "kick_left" else ("r", "l")
        out[f"hip_{s}"] = d(70) * g * p
        out[f"knee_{s}"] = d(15) * p
        out[f"flex_{o}"] = d(35) * p
        out[f"flex_{s}"] = -d(25) * p
        out["lean"] = -d(6) * p
    return out


@dataclass(frozen=True)
class MotionClip:
    activity: str
    frames: np.ndarray  # (T, J, 3)
    fps: float
    scale: float
    seed: int
    position: tuple = (0.0, 300.0, 0.0)
    yaw: float = 0.0

    def __post_init__(self):
        if self.activity not in ACTIVITIES:
            raise UnknownActivityError(self.activity)
        frames = np.asarray(self.frames, dtype=float).reshape(-1, N_JOINTS, 3)
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def velocities(self) -> np.ndarray:
        """Per-frame joint velocities in cm/s (backward differences, zero at the first frame)."""
        v = np.zeros_like(self.frames)
        if len(self) > 1:
            v[1:] = (self.frames[1:] - self.frames[:-1]) * self.fps
        return v

    def max_step(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(np.max(np.linalg.norm(np.diff(self.frames, axis=0), axis=2)))


def synth_motion(activity: str, duration_s: float, scale: float = 1.0, seed: int = 0,
                 amplitude: float = 1.0, position=None, yaw=None) -> MotionClip:
    """Seeded clip of one activity at 10 frames per second.

    Period, phase offset, movement gain, stance sway, scene position and heading
    are jittered from ``seed`` unless ``position``/``yaw`` are given.
    ``amplitude = 0`` produces a motionless rest clip.
    """
    if activity not in ACTIVITIES:
        raise UnknownActivityError(f"unknown activity {activity!r}; expected one of {ACTIVITIES}")
    if not duration_s > 0:
        raise ValueError("duration must be > 0")
    rng = np.random.default_rng(seed)
    period = rng.uniform(2.5, 3.5)
    offset = rng.uniform(0.0, period)
    jitter = {"gain": rng.uniform(0.85, 1.1)}
    sway_freq = rng.uniform(0.15, 0.3)
    sway_phase = rng.uniform(0, 2 * np.pi, size=2)
    if position is None:
        position = (rng.uniform(-40, 40), rng.uniform(260, 340), 0.0)
    if yaw is None:
        yaw = np.deg2rad(rng.uniform(-10, 10))
    n = int(round(duration_s * FPS))
    t = np.arange(n) / FPS
    frames = np.empty((n, N_JOINTS, 3))
    for i, ti in enumerate(t):
        phase = 0.5 * (1.0 - np.cos(2 * np.pi * (ti + offset) / period))
        ang = activity_angles(activity, phase, amplitude, jitter)
        body = pose_from_angles(ang, scale)
        sway = 2.0 * amplitude * np.sin(2 * np.pi * sway_freq * ti + sway_phase)
        body[:, :2] += sway
        frames[i] = _place(body, position, yaw)
    return MotionClip(activity, frames, FPS, float(scale), int(seed), tuple(float(x) for x in position), float(yaw))
