"""Diagnostic studies: signal/pose covariance, basis reconstruction error and signal margins."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import PointCloudFrame
from .simulator.radar import RadarConfig, render_frame
from .stats import DiagonalGaussian, FitConfig, GaussianMixture, em_fit, jensen_upper_bound

SCENE_BOX = ((-100.0, 100.0), (200.0, 400.0), (0.0, 200.0))
GRID = 8


class InsufficientSamplesError(ValueError):
    pass


class NonOrthonormalBasisWarning(UserWarning):
    pass


def rasterize_signal(frame, box=SCENE_BOX, bins=GRID) -> np.ndarray:
    """Intensity-weighted voxel occupancy over a fixed ``bins**3`` grid (points outside clip to the border)."""
    pts = frame.points if isinstance(frame, PointCloudFrame) else np.asarray(frame, dtype=float).reshape(-1, 5)
    out = np.zeros(bins ** 3)
    if pts.shape[0] == 0:
        return out
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    cell = np.floor((pts[:, :3] - lo) / (hi - lo) * bins).astype(int)
    cell = np.clip(cell, 0, bins - 1)
    flat = np.ravel_multi_index(cell.T, (bins, bins, bins))
    np.add.at(out, flat, pts[:, 3])
    return out


@dataclass
class CovarianceHalf:
    """Bootstrap ``|Cov|`` samples of one study with their mean and histogram."""

    samples: np.ndarray
    mean: float
    hist: np.ndarray = field(default_factory=lambda: np.zeros(0))
    edges: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class CovarianceReport:
    instance: CovarianceHalf
    distribution: CovarianceHalf

    @property
    def distribution_stronger(self) -> bool:
        return self.distribution.mean > self.instance.mean


def _pairs(n, n_pairs, rng):
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return i, j


def _standardised(v):
    s = v.std()
    return v / s if s > 0 else np.zeros_like(v)


def bootstrap_abs_cov(a, b, n_boot=200, batch_size=None, seed=0, bins=20, rank=True) -> CovarianceHalf:
    """``|Cov(a, b)|`` on bootstrap batches after scaling both to unit spread.

    With ``rank=True`` both inputs are first replaced by their ranks, so a
    distance and a squared-distance-like divergence are compared on equal
    footing; the scaling then makes every batch value a correlation-like score.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if rank:
        a, b = rankdata(a), rankdata(b)
    a, b = _standardised(a), _standardised(b)
    rng = np.random.default_rng(seed)
    size = batch_size or len(a)
    vals = np.empty(n_boot)
    for k in range(n_boot):
        idx = rng.integers(0, len(a), size=size)
        vals[k] = abs(np.cov(a[idx], b[idx])[0, 1])
    hist, edges = np.histogram(vals, bins=bins, range=(0.0, max(1.0, float(vals.max()))))
    return CovarianceHalf(vals, float(vals.mean()), hist, edges)


def covariance_instance_study(poses, frames, n_pairs=2000, n_boot=200, seed=0) -> CovarianceHalf:
    """Pose distance versus rasterised-signal distance over random pose pairs."""
    poses = np.asarray(poses, dtype=float)
    if len(poses) < 2 or len(frames) != len(poses):
        raise InsufficientSamplesError("need at least two (pose, frame) samples")
    raster = np.array([rasterize_signal(f) for f in frames])
    rng = np.random.default_rng(seed)
    i, j = _pairs(len(poses), n_pairs, rng)
    dp = np.linalg.norm((poses[i] - poses[j]).reshape(n_pairs, -1), axis=1)
    dx = np.linalg.norm(raster[i] - raster[j], axis=1)
    return bootstrap_abs_cov(dp, dx, n_boot, seed=seed + 1)


def _pca(X, dim):
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    return mean, vt[:dim]


def symmetric_mixture_divergence(p: GaussianMixture, q: GaussianMixture) -> float:
    """Average of the weighted Jensen bounds ``p -> q`` and ``q -> p`` (component-wise over the source)."""

    def one_way(a, b):
        return sum(w * jensen_upper_bound(DiagonalGaussian(m, np.sqrt(v)), b)[1]
                   for w, m, v in zip(a.weights, a.means, a.variances) if w > 0)

    return 0.5 * (one_way(p, q) + one_way(q, p))


def covariance_distribution_study(poses, sample_frames, n_pairs=2000, n_boot=200, seed=0, pca_dim=4,
                                  n_components=1, config: FitConfig | None = None) -> CovarianceHalf:
    """Pose distance versus symmetric divergence between per-pose signal mixtures.

    ``sample_frames[i]`` holds several renders of pose ``i``; they are
    rasterised, projected with one shared PCA, and summarised by a diagonal GMM.
    """
    poses = np.asarray(poses, dtype=float)
    if len(poses) < 2 or len(sample_frames) != len(poses):
        raise InsufficientSamplesError("need at least two poses with signal samples")
    counts = [len(s) for s in sample_frames]
    if min(counts) < max(2, n_components):
        raise InsufficientSamplesError(f"need at least {max(2, n_components)} signal samples per pose")
    raster = [np.array([rasterize_signal(f) for f in s]) for s in sample_frames]
    mean, comps = _pca(np.vstack(raster), pca_dim)
    cfg = config or FitConfig(seed=seed)
    mixes = [em_fit((r - mean) @ comps.T, n_components, cfg) for r in raster]
    rng = np.random.default_rng(seed)
    i, j = _pairs(len(poses), n_pairs, rng)
    cache = {}
    dxd = np.empty(n_pairs)
    for k, (a, b) in enumerate(zip(i, j)):
        key = (min(a, b), max(a, b))
        if key not in cache:
            cache[key] = symmetric_mixture_divergence(mixes[a], mixes[b])
        dxd[k] = cache[key]
    dp = np.linalg.norm((poses[i] - poses[j]).reshape(n_pairs, -1), axis=1)
    return bootstrap_abs_cov(dxd, dp, n_boot, seed=seed + 1)


def render_pose_samples(poses, n_samples=32, radar: RadarConfig | None = None, seed=0):
    """Independent radar renders of each static pose, ``[[PointCloudFrame] * n_samples] * len(poses)``."""
    radar = radar or RadarConfig()
    rng = np.random.default_rng(seed)
    return [[render_frame(p, radar, rng) for _ in range(n_samples)] for p in np.asarray(poses, dtype=float)]


def covariance_study(poses, n_samples=32, n_pairs=2000, n_boot=200, seed=0, radar=None, **kw) -> CovarianceReport:
    """Both halves on the same poses; the instance half uses each pose's first render."""
    samples = render_pose_samples(poses, n_samples, radar, seed)
    inst = covariance_instance_study(poses, [s[0] for s in samples], n_pairs, n_boot, seed)
    dist = covariance_distribution_study(poses, samples, n_pairs, n_boot, seed, **kw)
    return CovarianceReport(inst, dist)


def basis_reconstruction_error(F, basis, atol=1e-8):
    """``||F - P P^T F||^2`` per row of ``F``; warns when ``P`` has non-orthonormal columns."""
    P = np.asarray(getattr(basis, "matrix", basis), dtype=float)
    F = np.asarray(F, dtype=float)
    if not np.allclose(P.T @ P, np.eye(P.shape[1]), atol=atol):
        warnings.warn("basis columns are not orthonormal; the projector formula is then approximate",
                      NonOrthonormalBasisWarning, stacklevel=2)
    R = F - (F @ P) @ P.T
    err = np.sum(R * R, axis=-1)
    return float(err) if np.ndim(err) == 0 else err


def random_unit_basis(dim, n_columns=None, seed=0, orthonormal=False):
    """Columns drawn uniformly on the unit sphere (optionally orthonormalised by QR)."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dim, n_columns or dim))
    if orthonormal:
        Q, R = np.linalg.qr(A)
        return Q * np.sign(np.diag(R))
    return A / np.linalg.norm(A, axis=0, keepdims=True)


def basis_comparison(F, basis, n_random=20, seed=0) -> dict:
    """Mean reconstruction error of features ``F`` on the learned basis against random unit bases.

    The learned side uses the normalised cluster-mean columns (``basis.raw``), the
    near-orthogonal vectors produced by contrastive fine-tuning. Their exactly
    corrected version and any random orthonormal square basis span the whole
    space, so those two errors are reported only as a floating-point floor.
    """
    F = np.asarray(F, dtype=float)
    dim, n_cols = basis.raw.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonOrthonormalBasisWarning)
        learned = float(np.mean(basis_reconstruction_error(F, basis.raw)))
        random = float(np.mean([np.mean(basis_reconstruction_error(F, random_unit_basis(dim, n_cols, seed + i)))
                                for i in range(n_random)]))
    floor_learned = float(np.mean(basis_reconstruction_error(F, basis.matrix)))
    floor_random = float(np.mean(basis_reconstruction_error(F, random_unit_basis(dim, n_cols, seed, orthonormal=True))))
    S = np.abs(basis.raw.T @ basis.raw)
    np.fill_diagonal(S, 0.0)
    return {"learned_error": learned, "random_error": random,
            "ratio": random / learned if learned > 0 else float("inf"),
            "orthonormal_learned_error": floor_learned, "orthonormal_random_error": floor_random,
            "max_abs_cosine": float(S.max())}


def margin_difference(mu_s, mu_s_pos, mu_s_neg):
    """``||a - n||^2 - ||a - p||^2`` per row; positive when the negative is further away."""
    a, p, n = (np.asarray(v, dtype=float) for v in (mu_s, mu_s_pos, mu_s_neg))
    if not (a.shape == p.shape == n.shape):
        raise ValueError(f"dimension mismatch: {a.shape}, {p.shape}, {n.shape}")
    out = np.sum((a - n) ** 2, axis=-1) - np.sum((a - p) ** 2, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def held_out_margin(mu_s, labels, n_triples=1000, seed=0) -> float:
    """Mean margin difference over random (anchor, same-label, other-label) triples."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    by = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
    usable = [c for c, v in by.items() if len(v) >= 2]
    if not usable or len(by) < 2:
        raise InsufficientSamplesError("need two labels with at least one repeated")
    vals = []
    for _ in range(n_triples):
        c = usable[rng.integers(len(usable))]
        a, p = rng.choice(by[c], size=2, replace=False)
        others = np.flatnonzero(labels != c)
        n = others[rng.integers(len(others))]
        vals.append(margin_difference(mu_s[a], mu_s[p], mu_s[n]))
    return float(np.mean(vals))
