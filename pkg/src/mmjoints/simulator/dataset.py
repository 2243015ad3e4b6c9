"""Split-aware clip generation and K-frame windowing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .motion import ACTIVITIES, synth_motion
from .radar import RadarConfig, render_clip

# subject scale factors per split; disjoint so test subjects are unseen. The
# "pretrain" split is reserved for the black-box estimators so that their
# outputs on the descriptor-training split behave like outputs on unseen data.
SPLIT_SCALES = {
    "pretrain": (0.91, 0.96, 1.01, 1.04, 1.07),
    "train": (0.90, 0.95, 1.00, 1.03, 1.08),
    "val": (0.98,),
    "test": (0.93, 1.05, 1.10),
}
SPLIT_SEED_BASE = {"train": 0, "val": 10_000_000, "test": 20_000_000, "pretrain": 30_000_000}


@dataclass(frozen=True)
class SimulationConfig:
    clips_per_activity: dict = field(default_factory=lambda: {"pretrain": 6, "train": 6, "val": 1, "test": 2})
    duration_s: float = 4.0
    activities: tuple = ACTIVITIES
    seed: int = 0

    def __post_init__(self):
        if self.duration_s < 0:
            raise ValueError("duration must be >= 0")
        for split, n in self.clips_per_activity.items():
            if split not in SPLIT_SCALES:
                raise ValueError(f"unknown split {split!r}")
            if not 0 <= n <= 100:
                raise ValueError("clip counts must lie in [0, 100]")
        if not 0 <= self.seed < 5000 or len(self.activities) > 10:
            raise ValueError("seed must lie in [0, 5000) and at most 10 activities are supported")


def simulate_records(sim: SimulationConfig, radar: RadarConfig):
    """Render every clip of every split into flat per-frame records.

    Returns a list of dicts with keys ``frame_id``, ``timestamp``, ``points``
    ``(N, 5)``, ``gt_pose`` ``(J, 3)``, ``activity``, ``clip_id`` and ``split``.
    """
    records = []
    for split in SPLIT_SCALES:
        scales = SPLIT_SCALES[split]
        for ai, activity in enumerate(sim.activities):
            for c in range(sim.clips_per_activity.get(split, 0)):
                seed = SPLIT_SEED_BASE[split] + 1000 * sim.seed + 100 * ai + c
                clip_id = f"{split}-{activity}-{c:03d}"
                if sim.duration_s == 0:
                    continue
                scale = scales[(ai + c) % len(scales)]
                clip = synth_motion(activity, sim.duration_s, scale, seed)
                frames = render_clip(clip, radar, seed + 5_000_000)
                for i, fr in enumerate(frames):
                    records.append({
                        "frame_id": i,
                        "timestamp": fr.timestamp,
                        "points": fr.points,
                        "gt_pose": clip.frames[i],
                        "activity": activity,
                        "clip_id": clip_id,
                        "split": split,
                        "scale": scale,
                    })
    return records


@dataclass
class WindowSet:
    """K-frame windows ending at each frame from the K-th onward, per clip."""

    windows: list
    poses: np.ndarray
    labels: np.ndarray
    clip_ids: list
    frame_ids: np.ndarray
    K: int

    def __len__(self):
        return len(self.windows)

    @property
    def points(self):
        """Point array of the current (last) frame of each window."""
        return [w[-1] for w in self.windows]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return WindowSet([self.windows[i] for i in idx], self.poses[idx], self.labels[idx],
                         [self.clip_ids[i] for i in idx], self.frame_ids[idx], self.K)


def make_windows(records, K: int, split=None, activities=ACTIVITIES) -> WindowSet:
    if K < 1:
        raise ValueError("K must be >= 1")
    by_clip = {}
    for r in records:
        if split is not None and r["split"] != split:
            continue
        by_clip.setdefault(r["clip_id"], []).append(r)
    windows, poses, labels, clip_ids, frame_ids = [], [], [], [], []
    for cid in sorted(by_clip):
        recs = sorted(by_clip[cid], key=lambda r: r["frame_id"])
        for t in range(K - 1, len(recs)):
            windows.append([np.asarray(recs[s]["points"], dtype=float) for s in range(t - K + 1, t + 1)])
            poses.append(np.asarray(recs[t]["gt_pose"], dtype=float))
            labels.append(activities.index(recs[t]["activity"]))
            clip_ids.append(cid)
            frame_ids.append(recs[t]["frame_id"])
    poses = np.array(poses).reshape(-1, 17, 3)
    return WindowSet(windows, poses, np.array(labels, dtype=int), clip_ids, np.array(frame_ids, dtype=int), K)
