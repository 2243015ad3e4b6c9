"""Black-box pose estimators with controllable bias.

All kinds share one pooled point-set network over K-frame windows; they differ
in which joints are trained and what gets substituted at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..core import LOWER_BODY, N_JOINTS, UPPER_BODY
from ..nn import Adam, SetEncoder, minibatches, mse
from .motion import pose_from_angles
from .radar import lower_body_point_count

KINDS = ("Trained", "UpperOnly", "LowerOnly", "RandomInit", "PriorDefaulting")
TRAINABLE = ("Trained", "UpperOnly", "LowerOnly", "PriorDefaulting")

SCENE_CENTER = np.array([0.0, 300.0, 100.0])
SCENE_SCALE = 100.0
N_POINT_FEATURES = 6


class MissingTrainingDataError(ValueError):
    pass


class WindowLengthError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str = "Trained"
    window: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        if self.window < 1:
            raise ValueError("window length must be >= 1")


def point_features(points, k, K):
    """Per-point network input: scene-normalised xyz, log intensity, Doppler (m/s), frame offset."""
    pts = np.asarray(points, dtype=float).reshape(-1, 5)
    f = np.empty((pts.shape[0], N_POINT_FEATURES))
    f[:, :3] = (pts[:, :3] - SCENE_CENTER) / SCENE_SCALE
    f[:, 3] = np.log1p(pts[:, 3])
    f[:, 4] = pts[:, 4] / 100.0
    f[:, 5] = (k - (K - 1)) / K
    return f


def pack_windows(windows, K):
    """Stack windows of K point arrays into a padded ``(B, P, 6)`` tensor and mask."""
    feats = []
    for w in windows:
        if len(w) != K:
            raise WindowLengthError(f"expected windows of {K} frames, got {len(w)}")
        feats.append(np.vstack([point_features(f, k, K) for k, f in enumerate(w)]))
    P = max([f.shape[0] for f in feats] + [1])
    X = np.zeros((len(feats), P, N_POINT_FEATURES))
    mask = np.zeros((len(feats), P), dtype=bool)
    for i, f in enumerate(feats):
        X[i, : f.shape[0]] = f
        mask[i, : f.shape[0]] = True
    return X, mask


def default_pose():
    """Neutral standing pose at the scene centre, used when no training data is given."""
    return pose_from_angles({}) + np.array([0.0, 300.0, 0.0])


class PoseEstimator(BaseEstimator):
    """Pooled point-set regressor from a window of radar frames to the last frame's pose.

    Parameters
    ----------
    kind : {"Trained", "UpperOnly", "LowerOnly", "RandomInit", "PriorDefaulting"}
        ``UpperOnly``/``LowerOnly`` only fit one body region and freeze the other
        at the training-mean pose; ``RandomInit`` is never trained;
        ``PriorDefaulting`` substitutes the training-mean lower body whenever the
        window holds fewer than ``lower_threshold`` low points.
    window : int
    hidden, head : tuple
        Widths of the per-point and pooled stacks.
    epochs, batch_size, lr : training schedule.
    lower_threshold : int
    random_state : int
    """

    def __init__(self, kind="Trained", window=5, hidden=(64, 64), head=(128,), epochs=40,
                 batch_size=32, lr=2e-3, lower_threshold=6, random_state=0):
        self.kind = kind
        self.window = window
        self.hidden = hidden
        self.head = head
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lower_threshold = lower_threshold
        self.random_state = random_state

    def _joint_mask(self):
        m = np.zeros((N_JOINTS, 3))
        if self.kind == "UpperOnly":
            m[list(UPPER_BODY)] = 1
        elif self.kind == "LowerOnly":
            m[list(LOWER_BODY)] = 1
        else:
            m[:] = 1
        return m.ravel()

    def fit(self, windows=None, poses=None):
        EstimatorSpec(self.kind, self.window, self.random_state)
        if windows is None or poses is None or len(windows) == 0:
            if self.kind in TRAINABLE:
                raise MissingTrainingDataError(f"estimator kind {self.kind} needs training data")
            ref = default_pose()[None]
            self.mean_pose_ = ref[0]
            self.scale_ = np.full(N_JOINTS * 3, 20.0)
        else:
            poses = np.asarray(poses, dtype=float).reshape(-1, N_JOINTS, 3)
            self.mean_pose_ = poses.mean(axis=0)
            self.scale_ = np.maximum(poses.reshape(len(poses), -1).std(axis=0), 1.0)
        self.net_ = SetEncoder(N_POINT_FEATURES, tuple(self.hidden), tuple(self.head), N_JOINTS * 3,
                               seed=self.random_state)
        self.history_ = []
        if self.kind in TRAINABLE:
            self._train(windows, poses)
        return self

    def _train(self, windows, poses):
        X, mask = pack_windows(windows, self.window)
        Y = (poses.reshape(len(poses), -1) - self.mean_pose_.ravel()) / self.scale_
        jm = self._joint_mask()
        w = jm * jm.size / jm.sum()
        opt = Adam(self.net_.params, lr=self.lr)
        rng = np.random.default_rng(self.random_state)
        for _ in range(self.epochs):
            total = 0.0
            for idx in minibatches(len(X), self.batch_size, rng):
                out, cache = self.net_(X[idx], mask[idx])
                val, g = mse(out * w, Y[idx] * w)
                grads, _ = self.net_.backward(cache, g * w)
                opt.step(grads)
                total += val * len(idx)
            self.history_.append(total / len(X))

    def predict(self, windows):
        """Pose ``(B, J, 3)`` for each window of ``window`` frames."""
        check_is_fitted(self, "net_")
        X, mask = pack_windows(windows, self.window)
        out, _ = self.net_(X, mask)
        pred = (out * self.scale_ + self.mean_pose_.ravel()).reshape(-1, N_JOINTS, 3)
        lower, upper = list(LOWER_BODY), list(UPPER_BODY)
        if self.kind == "UpperOnly":
            pred[:, lower] = self.mean_pose_[lower]
        elif self.kind == "LowerOnly":
            pred[:, upper] = self.mean_pose_[upper]
        elif self.kind == "PriorDefaulting":
            for i, w in enumerate(windows):
                if sum(lower_body_point_count(f) for f in w) < self.lower_threshold:
                    pred[i, lower] = self.mean_pose_[lower]
        return pred


def make_estimator(spec: EstimatorSpec, windows=None, poses=None, **kwargs) -> PoseEstimator:
    """Build and (where the kind allows) train an estimator."""
    return PoseEstimator(kind=spec.kind, window=spec.window, random_state=spec.seed, **kwargs).fit(windows, poses)


def estimate(estimator: PoseEstimator, window) -> np.ndarray:
    """Single-window convenience wrapper returning a ``(J, 3)`` pose."""
    if len(window) != estimator.window:
        raise WindowLengthError(f"expected {estimator.window} frames, got {len(window)}")
    return estimator.predict([window])[0]
