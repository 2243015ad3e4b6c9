"""Per-joint sensing/reliability descriptor head."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..nn import MLP, Adam, BestSnapshot, holdout_split, minibatches, mse, sigmoid, sigmoid_backward

KERNEL_RADII = (5.0, 10.0, 20.0)
MODES = ("pose", "pose+signal", "pose+signal+refine")


def frame_features(joints, points, radii=KERNEL_RADII, d_ref=10.0):
    """Multi-scale clamped inverse-square intensity sums around each joint, ``log1p``-compressed.

    Returns ``(J, len(radii))``.
    """
    joints = np.asarray(joints, dtype=float).reshape(-1, 3)
    pts = np.asarray(points, dtype=float).reshape(-1, 5)
    if pts.shape[0] == 0:
        return np.zeros((joints.shape[0], len(radii)))
    d = np.linalg.norm(joints[:, None, :] - pts[None, :, :3], axis=2)
    out = np.stack([((d_ref / np.maximum(d, r)) ** 2) @ pts[:, 3] for r in radii], axis=1)
    return np.log1p(out)


class _Standardizer:
    def fit(self, X):
        self.mean = X.mean(axis=0)
        self.scale = np.maximum(X.std(axis=0), 1e-6)
        return self

    def __call__(self, X):
        return (X - self.mean) / self.scale


class DescriptorHead(BaseEstimator):
    """Two-branch hourglass head emitting ``(xi, kappa)`` for every joint.

    One branch sees the pose feature, the other the signal (and refined-pose)
    features; their codes are concatenated and mapped through sigmoid outputs.
    An optional ``prior`` (per-output logits, e.g. closed-form scores evaluated
    at the available positions) is added before the sigmoid, so the network
    learns a correction to it. Trained with the summed mean squared error of
    both descriptors.

    Parameters
    ----------
    mode : {"pose", "pose+signal", "pose+signal+refine"}
        Which feature groups are fed; only the input width changes.
    hourglass : tuple
        Widths of each branch.
    epochs, batch_size, lr : training schedule
    validation_fraction : float
        Share of the rows (in interleaved blocks) held out to pick the best epoch.
    random_state : int
    """

    def __init__(self, mode="pose+signal+refine", hourglass=(128, 32, 128), epochs=60, batch_size=32, lr=1e-3,
                 validation_fraction=0.15, random_state=0):
        self.mode = mode
        self.hourglass = hourglass
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _branch_inputs(self, pose_feat, signal_feat, refine_feat):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        pose_feat = np.asarray(pose_feat, dtype=float)
        n = len(pose_feat)
        other = []
        if self.mode != "pose":
            if signal_feat is None:
                raise ValueError(f"mode {self.mode} needs signal features")
            other.append(np.asarray(signal_feat, dtype=float))
        if self.mode == "pose+signal+refine":
            if refine_feat is None:
                raise ValueError(f"mode {self.mode} needs refined-pose features")
            other.append(np.asarray(refine_feat, dtype=float))
        B = np.hstack(other) if other else np.zeros((n, 1))
        return pose_feat, B

    def _forward(self, A, B, prior):
        ha, ca = self.branch_a_(A)
        hb, cb = self.branch_b_(B)
        z, co = self.out_(np.hstack([ha, hb]))
        return sigmoid(z + prior), (ca, cb, co, ha.shape[1])

    def _loss(self, A, B, P, Y, with_grad=False):
        y, cache = self._forward(A, B, P)
        J = Y.shape[1] // 2
        l_xi, g_xi = mse(y[:, :J], Y[:, :J])
        l_ka, g_ka = mse(y[:, J:], Y[:, J:])
        total = l_xi + l_ka
        if not with_grad:
            return total
        ca, cb, co, wa = cache
        dz = sigmoid_backward(y, np.hstack([g_xi, g_ka]))
        go, dh = self.out_.backward(co, dz)
        ga, _ = self.branch_a_.backward(ca, dh[:, :wa])
        gb, _ = self.branch_b_.backward(cb, dh[:, wa:])
        grads = {**{"a." + k: v for k, v in ga.items()}, **{"b." + k: v for k, v in gb.items()},
                 **{"o." + k: v for k, v in go.items()}}
        return total, grads

    @staticmethod
    def _prior(prior, n, width):
        if prior is None:
            return np.zeros((n, width))
        P = np.asarray(prior, dtype=float)
        if P.shape != (n, width):
            raise ValueError(f"prior must have shape {(n, width)}, got {P.shape}")
        return P

    def fit(self, pose_feat, signal_feat, refine_feat, targets, prior=None):
        """``targets`` and ``prior`` are ``(n, 2J)``: all ``xi`` columns, then all ``kappa``."""
        A, B = self._branch_inputs(pose_feat, signal_feat, refine_feat)
        Y = np.asarray(targets, dtype=float)
        P = self._prior(prior, len(A), Y.shape[1])
        self.n_joints_ = Y.shape[1] // 2
        self.std_a_ = _Standardizer().fit(A)
        self.std_b_ = _Standardizer().fit(B)
        A, B = self.std_a_(A), self.std_b_(B)
        hg = tuple(self.hourglass)
        acts = ("relu",) * len(hg)
        self.branch_a_ = MLP((A.shape[1],) + hg, acts, seed=self.random_state)
        self.branch_b_ = MLP((B.shape[1],) + hg, acts, seed=self.random_state + 1)
        self.out_ = MLP((2 * hg[-1], Y.shape[1]), seed=self.random_state + 2)
        params = {**{"a." + k: v for k, v in self.branch_a_.params.items()},
                  **{"b." + k: v for k, v in self.branch_b_.params.items()},
                  **{"o." + k: v for k, v in self.out_.params.items()}}
        opt = Adam(params, lr=self.lr)
        rng = np.random.default_rng(self.random_state)
        tr, va = holdout_split(len(A), self.validation_fraction)
        snap = BestSnapshot(params)
        self.initial_loss_ = self._loss(A, B, P, Y)
        self.history_ = []
        for epoch in range(self.epochs):
            tot = 0.0
            for b in minibatches(len(tr), self.batch_size, rng):
                idx = tr[b]
                val, grads = self._loss(A[idx], B[idx], P[idx], Y[idx], with_grad=True)
                opt.step(grads)
                tot += val * len(idx)
            self.history_.append(tot / len(tr))
            if len(va):
                snap.update(self._loss(A[va], B[va], P[va], Y[va]), epoch + 1)
        if len(va):
            snap.restore()
        self.best_epoch_ = snap.epoch if len(va) else self.epochs
        self.final_loss_ = self._loss(A, B, P, Y)
        return self

    def predict(self, pose_feat, signal_feat=None, refine_feat=None, prior=None):
        """``(xi, kappa)``, each ``(n, J)``."""
        check_is_fitted(self, "out_")
        A, B = self._branch_inputs(pose_feat, signal_feat, refine_feat)
        P = self._prior(prior, len(A), 2 * self.n_joints_)
        y, _ = self._forward(self.std_a_(A), self.std_b_(B), P)
        J = self.n_joints_
        return y[:, :J], y[:, J:]
