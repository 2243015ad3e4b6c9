"""Downstream uses of enriched poses: pose refinement and activity recognition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DatasetStats, tabulate_joint_types
from ..nn import MLP, Adam, SetEncoder, cross_entropy, minibatches, mse
from .metrics import pose_report

REFINE_MODES = ("pose_only", "pose+descriptors")
ACTIVITY_MODES = ("pose_only", "pose+xi", "pose+xi+kappa", "pose+gt_descriptors")


class MissingInputError(ValueError):
    """A downstream mode needs inputs the dataset does not carry."""


@dataclass
class EnrichedSet:
    """Per-frame estimator output with optional descriptors and ground truth."""

    preds: np.ndarray
    gt: np.ndarray
    xi: np.ndarray | None = None
    kappa: np.ndarray | None = None

    def __len__(self):
        return len(self.preds)


def _standardizer(X):
    mean = X.mean(axis=0)
    scale = np.maximum(X.std(axis=0), 1e-6)
    return lambda A: (A - mean) / scale


def _refine_inputs(data: EnrichedSet, mode):
    if mode not in REFINE_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {REFINE_MODES}")
    parts = [np.asarray(data.preds, dtype=float).reshape(len(data), -1)]
    if mode == "pose+descriptors":
        if data.xi is None or data.kappa is None:
            raise MissingInputError("pose+descriptors mode needs xi and kappa")
        parts += [np.asarray(data.xi, dtype=float), np.asarray(data.kappa, dtype=float)]
    return np.hstack(parts)


def refine_downstream(train: EnrichedSet, test: EnrichedSet, mode="pose+descriptors", hidden=(128, 128), epochs=60,
                      batch_size=32, lr=1e-3, seed=0, torso_diameter=20.0):
    """Train a residual dense refiner on ``train`` and report test metrics before and after.

    Both modes share architecture, seed and schedule; only the input width changes.
    Returns ``{"mode", "before", "after", "history", "refined"}``.
    """
    X_tr, X_te = _refine_inputs(train, mode), _refine_inputs(test, mode)
    std = _standardizer(X_tr)
    R_tr = (np.asarray(train.gt) - np.asarray(train.preds)).reshape(len(train), -1)
    r_scale = max(float(R_tr.std()), 1e-6)
    net = MLP((X_tr.shape[1],) + tuple(hidden) + (R_tr.shape[1],), seed=seed, out_scale=0.1)
    opt = Adam(net.params, lr=lr)
    rng = np.random.default_rng(seed)
    A, Y = std(X_tr), R_tr / r_scale
    history = []
    for _ in range(epochs):
        tot = 0.0
        for idx in minibatches(len(A), batch_size, rng):
            out, cache = net(A[idx])
            val, g = mse(out, Y[idx])
            opt.step(net.backward(cache, g)[0])
            tot += val * len(idx)
        history.append(tot / len(A))
    out, _ = net(std(X_te))
    refined = np.asarray(test.preds, dtype=float) + (out * r_scale).reshape(np.shape(test.preds))
    return {
        "mode": mode,
        "before": pose_report(test.preds, test.gt, torso_diameter),
        "after": pose_report(refined, test.gt, torso_diameter),
        "history": history,
        "refined": refined,
    }


@dataclass
class ActivitySet:
    """Windows of consecutive enriched frames with one activity label each.

    Arrays are ``poses (N, T, J, 3)``, descriptors ``(N, T, J)``.
    """

    poses: np.ndarray
    labels: np.ndarray
    xi: np.ndarray | None = None
    kappa: np.ndarray | None = None
    gt_xi: np.ndarray | None = None
    gt_kappa: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


def build_activity_windows(clip_ids, frame_ids, labels, arrays: dict, T=5):
    """Group per-frame arrays into windows of ``T`` consecutive frames of the same clip.

    ``arrays`` maps a name to a per-frame array (``None`` entries pass through).
    Returns ``(window labels, {name: (N, T, ...) array})``.
    """
    clip_ids = np.asarray(clip_ids)
    frame_ids = np.asarray(frame_ids)
    labels = np.asarray(labels)
    starts = []
    for cid in sorted(set(clip_ids.tolist())):
        rows = np.flatnonzero(clip_ids == cid)
        rows = rows[np.argsort(frame_ids[rows], kind="stable")]
        for t in range(T - 1, len(rows)):
            starts.append(rows[t - T + 1 : t + 1])
    idx = np.array(starts, dtype=int).reshape(-1, T)
    out = {k: (None if v is None else np.asarray(v)[idx]) for k, v in arrays.items()}
    return labels[idx[:, -1]] if len(idx) else labels[:0], out


def _activity_inputs(data: ActivitySet, mode):
    if mode not in ACTIVITY_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {ACTIVITY_MODES}")
    poses = np.asarray(data.poses, dtype=float)
    N, T = poses.shape[:2]
    # centre every window on its mean pelvis so the classifier sees body shape, not placement
    centred = poses - poses[:, :, :1].mean(axis=1, keepdims=True)
    parts = [centred.reshape(N, T, -1)]
    need = {"pose+xi": ("xi",), "pose+xi+kappa": ("xi", "kappa"), "pose+gt_descriptors": ("gt_xi", "gt_kappa")}
    for name in need.get(mode, ()):
        v = getattr(data, name)
        if v is None:
            raise MissingInputError(f"mode {mode} needs {name}")
        parts.append(np.asarray(v, dtype=float).reshape(N, T, -1))
    parts.append(np.broadcast_to((np.arange(T) / max(T - 1, 1))[None, :, None], (N, T, 1)))
    return np.concatenate(parts, axis=2)


def activity_downstream(train: ActivitySet, test: ActivitySet, mode="pose_only", n_classes=None, hidden=(64, 64),
                        head=(64,), epochs=40, batch_size=32, lr=2e-3, seed=0):
    """Temporal-pooling classifier trained per mode; returns overall and per-activity accuracy."""
    X_tr, X_te = _activity_inputs(train, mode), _activity_inputs(test, mode)
    y_tr = np.asarray(train.labels, dtype=int)
    y_te = np.asarray(test.labels, dtype=int)
    n_classes = n_classes or int(max(y_tr.max(), y_te.max() if len(y_te) else 0)) + 1
    flat = X_tr.reshape(-1, X_tr.shape[2])
    mean, scale = flat.mean(axis=0), np.maximum(flat.std(axis=0), 1e-6)
    A, B = (X_tr - mean) / scale, (X_te - mean) / scale
    net = SetEncoder(A.shape[2], tuple(hidden), tuple(head), n_classes, seed=seed)
    opt = Adam(net.params, lr=lr)
    rng = np.random.default_rng(seed)
    m_tr, m_te = np.ones(A.shape[:2], dtype=bool), np.ones(B.shape[:2], dtype=bool)
    history = []
    for _ in range(epochs):
        tot = 0.0
        for idx in minibatches(len(A), batch_size, rng):
            logits, cache = net(A[idx], m_tr[idx])
            val, g = cross_entropy(logits, y_tr[idx])
            opt.step(net.backward(cache, g)[0])
            tot += val * len(idx)
        history.append(tot / len(A))
    pred = np.argmax(net(B, m_te)[0], axis=1) if len(B) else np.zeros(0, dtype=int)
    correct = pred == y_te
    per_activity = {int(c): float(100.0 * correct[y_te == c].mean()) for c in np.unique(y_te)}
    return {
        "mode": mode,
        "accuracy": float(100.0 * correct.mean()) if len(correct) else 100.0,
        "per_activity": per_activity,
        "predictions": pred,
        "history": history,
    }


def flip_joint_types(base_pred, aug_pred, labels, psi, dist, stats: DatasetStats):
    """Joint-type counts over windows the baseline misclassifies but the augmented model gets right.

    ``psi`` and ``dist`` are ``(N, J)`` signal strengths and errors of each window's last frame.
    """
    labels = np.asarray(labels)
    flips = np.flatnonzero((np.asarray(base_pred) != labels) & (np.asarray(aug_pred) == labels))
    records = [(float(p), float(d)) for i in flips for p, d in zip(psi[i], dist[i])]
    return tabulate_joint_types(records, stats), len(flips)

