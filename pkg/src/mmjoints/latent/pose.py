"""Pose clustering, the pose VAE, orthogonality fine-tuning and the pose basis."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from ..nn import MLP, Adam, LossTermError, kl_to_standard_normal, minibatches, mse, opl, softplus, softplus_backward
from ..stats import DiagonalGMM, FitConfig, bic_select


class BasisError(ValueError):
    pass


def flatten_poses(poses) -> np.ndarray:
    poses = np.asarray(poses, dtype=float)
    return poses.reshape(poses.shape[0], -1)


def cluster_poses(poses, n_min: int, n_max: int = 24, config: FitConfig = FitConfig(), n_components=None,
                  subsample=1500):
    """Diagonal GMM over flattened (standardised) pose vectors.

    The component count is BIC-selected in ``[n_min, n_max]`` unless
    ``n_components`` is given. Returns ``(model, labels)``.
    """
    X = check_array(flatten_poses(poses), dtype=float)
    floor = n_components if n_components is not None else n_min
    if X.shape[0] < floor:
        raise ValueError(f"need at least {floor} poses to form {floor} clusters, got {X.shape[0]}")
    if n_components is None:
        n_components, _ = bic_select(X, max(n_min, min(n_max, X.shape[0])), config, G_min=n_min, subsample=subsample)
    model = DiagonalGMM(n_components, config.max_iterations, config.tol, config.var_floor, config.seed).fit(X)
    return model, model.predict(X)


def select_basis_clusters(centroids, sizes, mean_pose, n_select: int):
    """Top ``n_select`` clusters by ``distance(centroid, mean_pose) * size``; ties go to the lower id."""
    centroids = np.asarray(centroids, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    if centroids.shape[0] < n_select:
        raise ValueError(f"need at least {n_select} clusters, got {centroids.shape[0]}")
    d = np.linalg.norm(centroids - np.asarray(mean_pose, dtype=float).ravel(), axis=1)
    score = d * sizes
    order = sorted(range(len(score)), key=lambda i: (-score[i], i))
    return np.array(order[:n_select], dtype=int)


class PoseVAE(BaseEstimator, TransformerMixin):
    """Variational autoencoder over standardised flat poses.

    Parameters
    ----------
    latent_dim : int
    hidden : tuple
    epochs, batch_size, lr : training schedule
    lambda_kl : float
        Weight of the KL-to-standard-normal term.
    random_state : int
    """

    def __init__(self, latent_dim=8, hidden=(128, 64), epochs=60, batch_size=64, lr=2e-3, lambda_kl=1e-2,
                 random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_kl = lambda_kl
        self.random_state = random_state

    def _standardize(self, poses):
        return (flatten_poses(poses) - self.mean_) / self.scale_

    def _losses(self, X, eps):
        D = self.latent_dim
        h, ecache = self.encoder_(X)
        mu, s_raw = h[:, :D], h[:, D:]
        sigma = softplus(s_raw)
        z = mu + sigma * eps
        rec, dcache = self.decoder_(z)
        l_rec, g_rec = mse(rec, X)
        l_kl, g_mu_kl, g_sig_kl = kl_to_standard_normal(mu, sigma)
        return (l_rec, l_kl), (h, ecache, mu, sigma, s_raw, z, dcache, g_rec, g_mu_kl, g_sig_kl)

    def _loss_value(self, X, rng):
        eps = rng.standard_normal((X.shape[0], self.latent_dim))
        (l_rec, l_kl), _ = self._losses(X, eps)
        return l_rec + self.lambda_kl * l_kl, l_rec, l_kl

    def fit(self, poses, y=None):
        X0 = check_array(flatten_poses(poses), dtype=float)
        if X0.shape[0] == 0:
            raise ValueError("empty training set")
        self.mean_ = X0.mean(axis=0)
        self.scale_ = np.maximum(X0.std(axis=0), 1e-3)
        X = (X0 - self.mean_) / self.scale_
        D = self.latent_dim
        self.encoder_ = MLP((X.shape[1],) + tuple(self.hidden) + (2 * D,), seed=self.random_state)
        self.decoder_ = MLP((D,) + tuple(self.hidden[::-1]) + (X.shape[1],), seed=self.random_state + 1)
        rng = np.random.default_rng(self.random_state)
        self.initial_loss_ = self._loss_value(X, np.random.default_rng(self.random_state + 7))
        params = {**{"enc." + k: v for k, v in self.encoder_.params.items()},
                  **{"dec." + k: v for k, v in self.decoder_.params.items()}}
        opt = Adam(params, lr=self.lr)
        self.history_ = []
        for _ in range(self.epochs):
            tot = np.zeros(3)
            for idx in minibatches(len(X), self.batch_size, rng):
                eps = rng.standard_normal((len(idx), D))
                (l_rec, l_kl), (h, ecache, mu, sigma, s_raw, z, dcache, g_rec, g_mu, g_sig) = self._losses(X[idx], eps)
                g_dec, g_z = self.decoder_.backward(dcache, g_rec)
                d_mu = g_z + self.lambda_kl * g_mu
                d_sig = g_z * eps + self.lambda_kl * g_sig
                dh = np.hstack([d_mu, softplus_backward(s_raw, d_sig)])
                g_enc, _ = self.encoder_.backward(ecache, dh)
                grads = {**{"enc." + k: v for k, v in g_enc.items()}, **{"dec." + k: v for k, v in g_dec.items()}}
                opt.step(grads)
                tot += len(idx) * np.array([l_rec + self.lambda_kl * l_kl, l_rec, l_kl])
            self.history_.append(tuple(tot / len(X)))
        return self

    def encode(self, poses):
        """``(mu_p, sigma_p)`` for each pose."""
        check_is_fitted(self, "encoder_")
        h, _ = self.encoder_(self._standardize(poses))
        return h[:, : self.latent_dim], softplus(h[:, self.latent_dim:])

    def transform(self, poses):
        return self.encode(poses)[0]

    def decode(self, latent):
        check_is_fitted(self, "decoder_")
        out, _ = self.decoder_(np.atleast_2d(latent))
        return (out * self.scale_ + self.mean_).reshape(out.shape[0], -1, 3)

    def refit_decoder(self, poses, epochs=None, lr=None):
        """Retrain only the decoder on the current mean features (after the encoder moved)."""
        X = self._standardize(poses)
        mu, _ = self.encode(poses)
        rng = np.random.default_rng(self.random_state + 3)
        opt = Adam(self.decoder_.params, lr=lr or self.lr)
        history = []
        for _ in range(epochs or self.epochs):
            tot = 0.0
            for idx in minibatches(len(X), self.batch_size, rng):
                rec, cache = self.decoder_(mu[idx])
                val, g = mse(rec, X[idx])
                opt.step(self.decoder_.backward(cache, g)[0])
                tot += val * len(idx)
            history.append(tot / len(X))
        self.decoder_history_ = history
        return self


def mean_inter_class_cosine(features, labels):
    """Mean ``|cos|`` between the normalised per-class mean features (distinct pairs)."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means = np.array([features[labels == c].mean(axis=0) for c in classes])
    u = means / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)
    S = np.abs(u @ u.T)
    iu = np.triu_indices(len(classes), 1)
    return float(S[iu].mean()), float(S[iu].max())


def fine_tune_opl(vae: PoseVAE, poses, labels, lambda_s=0.5, epochs=150, batch_size=256, lr=1e-3, seed=0,
                  anchor_poses=None, lambda_rec=0.0, stop_cosine=None):
    """Return a copy of ``vae`` whose encoder was tuned with the orthogonal projection loss.

    With ``lambda_rec > 0`` each step also applies the VAE reconstruction loss on a
    batch of ``anchor_poses`` (decoder included) so the latent stays decodable.
    Without it only the encoder moves; call :meth:`PoseVAE.refit_decoder` afterwards.
    Training stops early once the largest ``|cos|`` between class-mean features
    drops below ``stop_cosine``.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise LossTermError("fine-tuning needs at least two classes")
    tuned = copy.deepcopy(vae)
    X = tuned._standardize(poses)
    A = tuned._standardize(anchor_poses) if anchor_poses is not None and lambda_rec > 0 else None
    D = tuned.latent_dim
    rng = np.random.default_rng(seed)
    params = {**{"enc." + k: v for k, v in tuned.encoder_.params.items()},
              **{"dec." + k: v for k, v in tuned.decoder_.params.items()}}
    opt = Adam(params, lr=lr)
    history = []
    for _ in range(epochs):
        for idx in minibatches(len(X), batch_size, rng):
            if np.unique(labels[idx]).size < 2:
                continue
            h, cache = tuned.encoder_(X[idx])
            val, g, _, _ = opl(h[:, :D], labels[idx], lambda_s)
            dh = np.zeros_like(h)
            dh[:, :D] = g
            grads = {"enc." + k: v for k, v in tuned.encoder_.backward(cache, dh)[0].items()}
            if A is not None:
                j = rng.choice(len(A), size=min(batch_size, len(A)), replace=False)
                eps = rng.standard_normal((len(j), D))
                _, (h2, c2, mu, sigma, s_raw, z, dcache, g_rec, g_mu, g_sig) = tuned._losses(A[j], eps)
                g_dec, g_z = tuned.decoder_.backward(dcache, lambda_rec * g_rec)
                d_mu = g_z + lambda_rec * tuned.lambda_kl * g_mu
                d_sig = g_z * eps + lambda_rec * tuned.lambda_kl * g_sig
                g_enc, _ = tuned.encoder_.backward(c2, np.hstack([d_mu, softplus_backward(s_raw, d_sig)]))
                for k, v in g_enc.items():
                    grads["enc." + k] = grads["enc." + k] + v
                grads.update({"dec." + k: v for k, v in g_dec.items()})
            opt.step(grads)
        mu = tuned.transform(poses)
        history.append(opl(mu, labels, lambda_s)[0])
        if stop_cosine is not None and mean_inter_class_cosine(mu, labels)[1] < stop_cosine:
            break
    tuned.opl_history_ = history
    return tuned


def gram_schmidt(columns, tol=1e-8):
    Q = np.zeros_like(columns)
    for i in range(columns.shape[1]):
        v = columns[:, i].copy()
        for _ in range(2):  # re-orthogonalise once for numerical safety
            v -= Q[:, :i] @ (Q[:, :i].T @ v)
        n = np.linalg.norm(v)
        if n < tol:
            raise BasisError("cluster mean features are rank deficient")
        Q[:, i] = v / n
    return Q


@dataclass(frozen=True)
class PoseBasis:
    """Square pose basis with one attached latent-signal mixture per column.

    ``raw`` keeps the normalised cluster-mean features before orthogonal correction.
    """

    matrix: np.ndarray
    raw: np.ndarray
    distributions: tuple = ()
    cluster_ids: tuple = ()
    signal_dim: int = 0

    def __post_init__(self):
        P = np.asarray(self.matrix, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise BasisError(f"basis must be square, got {P.shape}")
        if not np.isfinite(np.linalg.cond(P)):
            raise BasisError("basis is singular")
        if self.distributions and len(self.distributions) != P.shape[1]:
            raise BasisError("need exactly one distribution per basis column")
        object.__setattr__(self, "matrix", P)

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def consistency_dim(self):
        return 1 + 2 * self.signal_dim

    def max_raw_cosine(self):
        S = np.abs(self.raw.T @ self.raw)
        np.fill_diagonal(S, 0.0)
        return float(S.max())


def build_pose_basis(cluster_features, distributions=(), cluster_ids=(), signal_dim=0) -> PoseBasis:
    """Normalise the per-cluster mean features (columns), then Gram–Schmidt them."""
    F = np.asarray(cluster_features, dtype=float)
    F = F / np.maximum(np.linalg.norm(F, axis=0, keepdims=True), 1e-300)
    Q = gram_schmidt(F)
    return PoseBasis(Q, F, tuple(distributions), tuple(int(c) for c in cluster_ids), signal_dim)


def decompose_pose(p, basis: PoseBasis):
    """Coordinates ``p_omega`` with ``basis.matrix @ p_omega = p``; accepts ``(D,)`` or ``(B, D)``."""
    p = np.asarray(p, dtype=float)
    try:
        return np.linalg.solve(basis.matrix, p.T).T
    except np.linalg.LinAlgError as exc:
        raise BasisError("basis is singular") from exc
