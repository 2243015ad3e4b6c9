"""Loss terms; each returns ``(value, gradient(s) w.r.t. its inputs)``."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import softmax


class LossTermError(ValueError):
    pass


def _same_shape(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(pred, target):
    pred, target = _same_shape(pred, target)
    r = pred - target
    return float(np.mean(r**2)), 2.0 * r / r.size


def huber(pred, target, delta=1.0):
    pred, target = _same_shape(pred, target)
    r = pred - target
    a = np.abs(r)
    quad = a <= delta
    val = np.where(quad, 0.5 * r**2, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r)) / r.size
    return float(np.mean(val)), grad


def kl_to_standard_normal(mu, sigma):
    """Mean over the batch of ``KL(N(mu, diag(sigma^2)) || N(0, I))``.

    Returns ``(value, d_mu, d_sigma)``.
    """
    mu, sigma = _same_shape(mu, sigma)
    mu2, s2 = np.atleast_2d(mu), np.atleast_2d(sigma)
    B = mu2.shape[0]
    val = 0.5 * np.sum(s2**2 + mu2**2 - 1.0 - 2.0 * np.log(s2)) / B
    d_mu = mu / B
    d_sigma = (sigma - 1.0 / sigma) / B
    return float(val), d_mu, d_sigma


def triplet(anchor, positive, negative, margin=0.2):
    """Mean hinge ``max(0, |a-p|^2 - |a-n|^2 + margin)``; returns ``(value, da, dp, dn)``."""
    a, p = _same_shape(anchor, positive)
    _, n = _same_shape(anchor, negative)
    a, p, n = np.atleast_2d(a), np.atleast_2d(p), np.atleast_2d(n)
    dap = np.sum((a - p) ** 2, axis=1)
    dan = np.sum((a - n) ** 2, axis=1)
    h = dap - dan + margin
    active = (h > 0).astype(float)[:, None] / a.shape[0]
    da = active * (2 * (a - p) - 2 * (a - n))
    dp = active * (-2 * (a - p))
    dn = active * (2 * (a - n))
    return float(np.mean(np.maximum(h, 0.0))), da, dp, dn


def mine_semihard(embeddings, labels, margin=0.2, rng=None):
    """In-batch semi-hard triplets.

    For each anchor with at least one positive and one negative, one positive is
    drawn; the negative is the closest one farther than the positive within the
    margin, else the hardest negative. Returns index arrays ``(a, p, n)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    d = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
    A, P, N = [], [], []
    for i in range(x.shape[0]):
        pos = np.flatnonzero((labels == labels[i]) & (np.arange(len(labels)) != i))
        neg = np.flatnonzero(labels != labels[i])
        if pos.size == 0 or neg.size == 0:
            continue
        j = pos[rng.integers(pos.size)]
        dn = d[i, neg]
        semi = (dn > d[i, j]) & (dn < d[i, j] + margin)
        k = neg[np.argmin(np.where(semi, dn, np.inf))] if semi.any() else neg[np.argmin(dn)]
        A.append(i)
        P.append(j)
        N.append(k)
    return np.array(A, dtype=int), np.array(P, dtype=int), np.array(N, dtype=int)


def cross_entropy(logits, labels):
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    p = softmax(logits)
    B = logits.shape[0]
    val = -np.mean(np.log(p[np.arange(B), labels] + 1e-300))
    grad = p.copy()
    grad[np.arange(B), labels] -= 1.0
    return float(val), grad / B


def opl(features, labels, lambda_s=0.5):
    """Orthogonal projection loss on L2-normalised features.

    ``L_d`` is the mean absolute cosine over inter-class pairs, ``L_s`` is one
    minus the mean cosine over intra-class pairs. Returns
    ``(L_d + lambda_s * L_s, grad, L_d, L_s)``.
    """
    f = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise LossTermError("orthogonal projection loss needs at least two classes in the batch")
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    norm = np.maximum(norm, 1e-12)
    u = f / norm
    S = u @ u.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    intra = same & off
    inter = ~same
    n_intra, n_inter = intra.sum(), inter.sum()
    L_d = np.abs(S[inter]).sum() / n_inter
    L_s = 1.0 - S[intra].sum() / n_intra if n_intra else 0.0
    dS = np.zeros_like(S)
    dS[inter] = np.sign(S[inter]) / n_inter
    if n_intra:
        dS[intra] = -lambda_s / n_intra
    du = (dS + dS.T) @ u
    # project out the radial component of the normalisation
    df = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norm
    return float(L_d + lambda_s * L_s), df, float(L_d), float(L_s)


@dataclass
class LossBundle:
    """Loss weights plus the per-term values recorded during training."""

    lambda_step2: float = 1e-2
    lambda_step3: float = 0.5
    lambda_0: float = 1.0
    lambda_1: float = 1.0
    lambda_2: float = 1e-2
    lambda_div: float = 1e-2
    lambda_inter: float = 0.1
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lambda_step2", "lambda_step3", "lambda_0", "lambda_1", "lambda_2", "lambda_div", "lambda_inter"):
            w = getattr(self, name)
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"{name} must be a finite non-negative weight, got {w}")

    def weights(self):
        return {k: v for k, v in asdict(self).items() if k != "values"}
