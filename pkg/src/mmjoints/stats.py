"""Diagonal Gaussians, diagonal GMMs and the divergences used between them.

Also hosts the Hungarian solver and the permutation-invariant component
matching loss built on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

LOG_2PI = math.log(2.0 * math.pi)


class FitError(ValueError):
    """Raised when a mixture cannot be fitted to the given samples."""


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        std = np.atleast_1d(np.asarray(self.std, dtype=float))
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError(f"mean {mean.shape} and std {std.shape} must be equal 1-D shapes")
        if np.any(std <= 0):
            raise ValueError("std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def var(self) -> np.ndarray:
        return self.std**2

    def log_prob(self, x):
        x = np.atleast_2d(x)
        z = (x - self.mean) / self.std
        return -0.5 * np.sum(z**2 + LOG_2PI + 2.0 * np.log(self.std), axis=1)

    def sample(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class GaussianMixture:
    """Diagonal-covariance mixture; arrays are ``(G,)``, ``(G, D)``, ``(G, D)``."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        sd = np.atleast_2d(np.asarray(self.stds, dtype=float))
        if mu.shape != sd.shape or w.shape != (mu.shape[0],):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, stds {sd.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(sd <= 0):
            raise ValueError("stds must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    @classmethod
    def from_variances(cls, weights, means, variances):
        weights = np.asarray(weights, dtype=float)
        return cls(weights / weights.sum(), means, np.sqrt(variances))

    @classmethod
    def single(cls, gaussian: DiagonalGaussian):
        return cls(np.ones(1), gaussian.mean[None], gaussian.std[None])

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def variances(self) -> np.ndarray:
        return self.stds**2

    @property
    def components(self) -> list:
        return [DiagonalGaussian(m, s) for m, s in zip(self.means, self.stds)]

    def triples(self) -> list:
        return [MixtureComponent(float(p), m, s**2) for p, m, s in zip(self.weights, self.means, self.stds)]

    def component_log_probs(self, x):
        x = np.atleast_2d(x)
        z = (x[:, None, :] - self.means[None]) / self.stds[None]
        return -0.5 * np.sum(z**2 + LOG_2PI + 2.0 * np.log(self.stds)[None], axis=2)

    def log_prob(self, x):
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(self.component_log_probs(x) + logw, axis=1)

    def sample(self, n, rng):
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[idx] + self.stds[idx] * rng.standard_normal((n, self.dim))

    def padded(self, G: int) -> "GaussianMixture":
        """Append zero-weight copies of the heaviest component up to ``G``."""
        if self.n_components > G:
            raise ValueError(f"mixture has {self.n_components} > {G} components")
        extra = G - self.n_components
        if extra == 0:
            return self
        k = int(np.argmax(self.weights))
        return GaussianMixture(
            np.concatenate([self.weights, np.zeros(extra)]),
            np.vstack([self.means, np.repeat(self.means[k : k + 1], extra, 0)]),
            np.vstack([self.stds, np.repeat(self.stds[k : k + 1], extra, 0)]),
        )


@dataclass(frozen=True)
class MixtureComponent:
    """One mixture component as ``(phi, mean, diagonal covariance)``."""

    phi: float
    mean: np.ndarray
    cov_diag: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_1d(np.asarray(self.cov_diag, dtype=float))
        if mean.shape != cov.shape:
            raise ValueError("mean and cov_diag must have equal shapes")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError(f"phi out of [0, 1]: {self.phi}")
        if np.any(cov <= 0):
            raise ValueError("cov_diag must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_diag", cov)


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 200
    tol: float = 1e-6
    var_floor: float = 1e-6
    seed: int = 0
    g_max: int = 4

    def __post_init__(self):
        if self.tol <= 0 or self.var_floor <= 0:
            raise ValueError("tol and var_floor must be > 0")


# --------------------------------------------------------------------------
# EM fitting


def _kmeanspp(X, G, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, G):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


class DiagonalGMM(BaseEstimator):
    """Diagonal-covariance Gaussian mixture fitted by EM.

    Parameters
    ----------
    n_components : int
    max_iter : int
    tol : float
        Stop once the mean per-sample log-likelihood improves by less than this.
    var_floor : float
        Lower bound applied to every variance after each M-step.
    random_state : int
        Seed for k-means++ initialisation.
    """

    def __init__(self, n_components=1, max_iter=200, tol=1e-6, var_floor=1e-6, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor
        self.random_state = random_state

    def _m_step(self, X, resp):
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        means = resp.T @ X / nk[:, None]
        var = np.einsum("ng,ngd->gd", resp, (X[:, None, :] - means[None]) ** 2) / nk[:, None]
        return nk / X.shape[0], means, np.maximum(var, self.var_floor)

    def _log_joint(self, X, weights, means, var):
        z2 = (X[:, None, :] - means[None]) ** 2 / var[None]
        comp = -0.5 * np.sum(z2 + LOG_2PI + np.log(var)[None], axis=2)
        with np.errstate(divide="ignore"):
            return comp + np.log(weights)[None]

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        n, D = X.shape
        G = int(self.n_components)
        if G < 1:
            raise FitError("n_components must be >= 1")
        if n < G:
            raise FitError(f"need at least {G} samples to fit {G} components, got {n}")
        rng = np.random.default_rng(self.random_state)

        if np.all(np.ptp(X, axis=0) == 0):
            self.weights_ = np.ones(1)
            self.means_ = X[:1].copy()
            self.variances_ = np.full((1, D), self.var_floor)
            self.history_ = [float(self._log_joint(X, self.weights_, self.means_, self.variances_).sum())]
            self.n_iter_ = 0
            self.converged_ = True
            return self

        centers = _kmeanspp(X, G, rng)
        labels = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        resp = np.zeros((n, G))
        resp[np.arange(n), labels] = 1.0
        weights, means, var = self._m_step(X, resp)

        history = []
        self.converged_ = False
        for it in range(self.max_iter):
            lj = self._log_joint(X, weights, means, var)
            lse = logsumexp(lj, axis=1)
            history.append(float(lse.sum()))
            if it > 0 and (history[-1] - history[-2]) / n < self.tol:
                self.converged_ = True
                break
            resp = np.exp(lj - lse[:, None])
            weights, means, var = self._m_step(X, resp)
        self.weights_, self.means_, self.variances_ = weights, means, var
        self.history_ = history
        self.n_iter_ = len(history)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "means_")
        X = check_array(X, dtype=float)
        lj = self._log_joint(X, self.weights_, self.means_, self.variances_)
        return np.exp(lj - logsumexp(lj, axis=1)[:, None])

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score_samples(self, X):
        check_is_fitted(self, "means_")
        X = check_array(X, dtype=float)
        return logsumexp(self._log_joint(X, self.weights_, self.means_, self.variances_), axis=1)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def bic(self, X):
        X = check_array(X, dtype=float)
        n, D = X.shape
        G = self.weights_.shape[0]
        p = G * (2 * D + 1) - 1
        return -2.0 * float(np.sum(self.score_samples(X))) + p * math.log(n)

    @property
    def mixture_(self) -> GaussianMixture:
        check_is_fitted(self, "means_")
        return GaussianMixture.from_variances(self.weights_, self.means_, self.variances_)


def em_fit(samples, G: int, config: FitConfig = FitConfig(), return_model=False):
    """Fit a ``G``-component diagonal GMM by EM; returns a :class:`GaussianMixture`."""
    model = DiagonalGMM(G, config.max_iterations, config.tol, config.var_floor, config.seed).fit(samples)
    return (model.mixture_, model) if return_model else model.mixture_


def bic_select(samples, G_max: int, config: FitConfig = FitConfig(), G_min: int = 1, subsample=None):
    """Number of components in ``[G_min, G_max]`` minimising BIC (ties -> fewer).

    Returns ``(G_best, {G: bic})``.
    """
    if G_max < 1 or G_min < 1 or G_min > G_max:
        raise ValueError(f"invalid component range [{G_min}, {G_max}]")
    X = check_array(samples, dtype=float)
    if subsample is not None and X.shape[0] > subsample:
        rng = np.random.default_rng(config.seed)
        X = X[np.sort(rng.choice(X.shape[0], subsample, replace=False))]
    scores = {}
    for G in range(G_min, G_max + 1):
        model = DiagonalGMM(G, config.max_iterations, config.tol, config.var_floor, config.seed).fit(X)
        scores[G] = model.bic(X)
    best = min(scores, key=lambda g: (scores[g], g))
    return best, scores


# --------------------------------------------------------------------------
# divergences


def _check_dims(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def kl_diag(p: DiagonalGaussian, q: DiagonalGaussian) -> float:
    """Closed-form KL(p || q) for diagonal Gaussians."""
    _check_dims(p.mean, q.mean)
    vp, vq = p.var, q.var
    return float(0.5 * np.sum(np.log(vq / vp) + (vp + (p.mean - q.mean) ** 2) / vq - 1.0))


def jeffrey_gaussians(p: DiagonalGaussian, q: DiagonalGaussian) -> float:
    """Symmetrised KL; the log-determinant terms cancel."""
    _check_dims(p.mean, q.mean)
    vp, vq = p.var, q.var
    d2 = (p.mean - q.mean) ** 2
    return float(0.5 * np.sum((vp + d2) / vq + (vq + d2) / vp - 2.0))


def jeffrey_terms(mu_s, var_s, mu, var):
    """Jeffrey divergence of ``N(mu_s, var_s)`` against each row of ``(mu, var)``.

    Broadcasts over leading axes: ``mu_s`` ``(..., D)``, ``mu`` ``(..., G, D)``.
    """
    mu_s = np.asarray(mu_s)[..., None, :]
    var_s = np.asarray(var_s)[..., None, :]
    d2 = (mu_s - mu) ** 2
    return 0.5 * np.sum((var_s + d2) / var + (var + d2) / var_s - 2.0, axis=-1)


def jensen_upper_bound(p_s: DiagonalGaussian, p_g: GaussianMixture):
    """Weighted Jeffrey divergence of ``p_s`` to each mixture component.

    Returns ``(per_component, total)`` where ``per_component[i] = phi_i * J(p_s, c_i)``;
    ``total`` upper-bounds ``J(p_s, p_g)``.
    """
    _check_dims(p_s.mean, p_g.means)
    terms = p_g.weights * jeffrey_terms(p_s.mean, p_s.var, p_g.means, p_g.variances)
    return terms, float(math.fsum(terms))


def jensen_bound_grad(mu_s, var_s, phi, mu, var):
    """Bound value and its gradient w.r.t. the mixture parameters.

    Shapes: ``mu_s, var_s`` ``(B, D)``; ``phi`` ``(B, G)``; ``mu, var`` ``(B, G, D)``.
    Returns ``(total (B,), d_phi, d_mu, d_var)``.
    """
    J = jeffrey_terms(mu_s, var_s, mu, var)
    total = np.sum(phi * J, axis=-1)
    delta = mu_s[:, None, :] - mu
    d2 = delta**2
    vs = var_s[:, None, :]
    d_phi = J
    d_mu = phi[..., None] * (-delta * (1.0 / var + 1.0 / vs))
    d_var = phi[..., None] * 0.5 * (-(vs + d2) / var**2 + 1.0 / vs)
    return total, d_phi, d_mu, d_var


def mc_jeffrey(p_s: DiagonalGaussian, p_g: GaussianMixture, n_samples: int, seed: int = 0):
    """Monte-Carlo estimate of ``KL(p_g||p_s) + KL(p_s||p_g)`` with its standard error."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    _check_dims(p_s.mean, p_g.means)
    rng = np.random.default_rng(seed)
    xg = p_g.sample(n_samples, rng)
    xs = p_s.sample(n_samples, rng)
    a = p_g.log_prob(xg) - p_s.log_prob(xg)
    b = p_s.log_prob(xs) - p_g.log_prob(xs)
    est = float(a.mean() + b.mean())
    if n_samples > 1:
        se = math.sqrt(a.var(ddof=1) / n_samples + b.var(ddof=1) / n_samples)
    else:
        se = float("inf")
    return est, se


# --------------------------------------------------------------------------
# linear assignment


def _hungarian_potentials(c):
    """Shortest augmenting path Hungarian method; returns row->col and dual potentials."""
    n = c.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    rows = c.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = rows[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = [0] * n
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign, np.array(u[1:]), np.array(v[1:])


def _has_perfect_matching(adj, rows, cols):
    """Kuhn's augmenting-path matching restricted to ``rows`` x ``cols``."""
    match = {}

    def try_row(r, seen):
        for c in adj[r]:
            if c in cols and c not in seen:
                seen.add(c)
                if c not in match or try_row(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(try_row(r, set()) for r in rows)


def hungarian(cost):
    """Minimum-cost perfect assignment of a square matrix.

    Among equally optimal assignments the lexicographically smallest
    permutation is returned. Returns ``(perm, total)`` with ``perm[i]`` the
    column assigned to row ``i``.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    n = c.shape[0]
    if n == 0:
        return [], 0.0
    _, u, v = _hungarian_potentials(c)
    # every optimal assignment lives on the zero-reduced-cost edges of an optimal dual
    reduced = c - u[:, None] - v[None, :]
    tol = 1e-9 * (1.0 + np.abs(c).max())
    adj = [[j for j in range(n) if reduced[i, j] <= tol] for i in range(n)]
    perm = []
    free_cols = set(range(n))
    for i in range(n):
        for j in adj[i]:
            if j not in free_cols:
                continue
            rest = free_cols - {j}
            if _has_perfect_matching(adj, range(i + 1, n), rest):
                perm.append(j)
                free_cols = rest
                break
    total = math.fsum(c[i, perm[i]] for i in range(n))
    return perm, total


def component_assessment(a: MixtureComponent, b: MixtureComponent) -> float:
    """L1 distance between two components over weight, mean and diagonal covariance."""
    _check_dims(a.mean, b.mean)
    return math.fsum(
        [abs(a.phi - b.phi)] + list(np.abs(a.mean - b.mean)) + list(np.abs(a.cov_diag - b.cov_diag))
    )


def assessment_matrix(est_phi, est_mu, est_var, tgt_phi, tgt_mu, tgt_var):
    """Pairwise component assessment between two triples stacks ``(G, ...)``."""
    return (
        np.abs(est_phi[:, None] - tgt_phi[None, :])
        + np.abs(est_mu[:, None, :] - tgt_mu[None, :, :]).sum(-1)
        + np.abs(est_var[:, None, :] - tgt_var[None, :, :]).sum(-1)
    )


def _stack(triples):
    phi = np.array([t.phi for t in triples], dtype=float)
    mu = np.array([t.mean for t in triples], dtype=float)
    var = np.array([t.cov_diag for t in triples], dtype=float)
    return phi, mu, var


def lap_loss(estimated, target):
    """Permutation-invariant matching loss between two equal-size component lists.

    Returns ``(loss, matching)`` with ``matching[i]`` the target matched to
    estimated component ``i``.
    """
    if len(estimated) != len(target):
        raise ValueError(f"component count mismatch: {len(estimated)} vs {len(target)}")
    cost = np.array([[component_assessment(a, b) for b in target] for a in estimated])
    perm, loss = hungarian(cost)
    return loss, perm


def lap_loss_grad(est_phi, est_mu, est_var, tgt_phi, tgt_mu, tgt_var):
    """LAP loss of one sample with the optimal matching held fixed for the gradient.

    Returns ``(loss, perm, d_phi, d_mu, d_var)``; gradients are sign terms of the
    matched L1 differences.
    """
    cost = assessment_matrix(est_phi, est_mu, est_var, tgt_phi, tgt_mu, tgt_var)
    perm, loss = hungarian(cost)
    perm = np.asarray(perm)
    d_phi = np.sign(est_phi - tgt_phi[perm])
    d_mu = np.sign(est_mu - tgt_mu[perm])
    d_var = np.sign(est_var - tgt_var[perm])
    return loss, perm, d_phi, d_mu, d_var
