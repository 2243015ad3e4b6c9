"""Window-level signal encoder and per-pose empirical signal distributions."""

from __future__ import annotations

from collections import Counter

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..nn import (
    MLP,
    Adam,
    SetEncoder,
    cross_entropy,
    kl_to_standard_normal,
    mine_semihard,
    minibatches,
    softplus,
    softplus_backward,
    triplet,
)
from ..simulator.estimators import N_POINT_FEATURES, pack_windows
from ..stats import FitConfig, GaussianMixture, bic_select, em_fit


class SignalEncoder(BaseEstimator, TransformerMixin):
    """Permutation-invariant encoder of K-frame windows into ``(mu_S, sigma_S)``.

    Trained with a semi-hard triplet loss on ``mu_S``, cross-entropy of a linear
    classifier on reparameterised samples, and a KL pull towards N(0, I).

    Parameters
    ----------
    signal_dim : int
    window : int
    hidden, head : tuple
    epochs, batch_size, lr : training schedule
    lambda_triplet, lambda_ce, lambda_kl : float
    margin : float
    random_state : int
    """

    def __init__(self, signal_dim=16, window=5, hidden=(64, 64), head=(128,), epochs=40, batch_size=64, lr=2e-3,
                 lambda_triplet=1.0, lambda_ce=1.0, lambda_kl=1e-2, margin=0.2, random_state=0):
        self.signal_dim = signal_dim
        self.window = window
        self.hidden = hidden
        self.head = head
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_triplet = lambda_triplet
        self.lambda_ce = lambda_ce
        self.lambda_kl = lambda_kl
        self.margin = margin
        self.random_state = random_state

    def _step(self, X, mask, y, rng, train=True):
        D = self.signal_dim
        h, cache = self.net_(X, mask)
        mu, s_raw = h[:, :D], h[:, D:]
        sigma = softplus(s_raw)
        eps = rng.standard_normal(mu.shape)
        z = mu + sigma * eps
        logits, ccache = self.classifier_(z)
        l_ce, g_logits = cross_entropy(logits, y)
        l_kl, g_mu_kl, g_sig_kl = kl_to_standard_normal(mu, sigma)
        a, p, n = mine_semihard(mu, y, self.margin, rng)
        d_mu = self.lambda_kl * g_mu_kl
        if len(a):
            l_tri, da, dp, dn = triplet(mu[a], mu[p], mu[n], self.margin)
            np.add.at(d_mu, a, self.lambda_triplet * da)
            np.add.at(d_mu, p, self.lambda_triplet * dp)
            np.add.at(d_mu, n, self.lambda_triplet * dn)
        else:
            l_tri = 0.0
        total = self.lambda_triplet * l_tri + self.lambda_ce * l_ce + self.lambda_kl * l_kl
        if not train:
            return total, (l_tri, l_ce, l_kl)
        g_cls, g_z = self.classifier_.backward(ccache, self.lambda_ce * g_logits)
        d_mu = d_mu + g_z
        d_sig = g_z * eps + self.lambda_kl * g_sig_kl
        dh = np.hstack([d_mu, softplus_backward(s_raw, d_sig)])
        g_net, _ = self.net_.backward(cache, dh)
        grads = {**g_net, **{"cls." + k: v for k, v in g_cls.items()}}
        return total, grads

    def fit(self, windows, labels):
        labels = np.asarray(labels, dtype=int)
        if len(windows) != len(labels):
            raise ValueError("one label per window required")
        X, mask = pack_windows(windows, self.window)
        self.n_classes_ = int(labels.max()) + 1
        self.net_ = SetEncoder(N_POINT_FEATURES, tuple(self.hidden), tuple(self.head), 2 * self.signal_dim,
                               seed=self.random_state)
        self.classifier_ = MLP((self.signal_dim, self.n_classes_), seed=self.random_state + 1)
        # Adam updates arrays in place, so the merged dict shares storage with both nets
        params = {**self.net_.params, **{"cls." + k: v for k, v in self.classifier_.params.items()}}
        opt = Adam(params, lr=self.lr)
        rng = np.random.default_rng(self.random_state)
        eval_rng = np.random.default_rng(self.random_state + 11)
        probe = np.sort(eval_rng.choice(len(X), size=min(256, len(X)), replace=False))
        self.initial_loss_ = self._step(X[probe], mask[probe], labels[probe], np.random.default_rng(0), False)[0]
        self.history_ = []
        for _ in range(self.epochs):
            tot = 0.0
            for idx in minibatches(len(X), self.batch_size, rng):
                val, grads = self._step(X[idx], mask[idx], labels[idx], rng)
                opt.step(grads)
                tot += val * len(idx)
            self.history_.append(tot / len(X))
        self.final_loss_ = self._step(X[probe], mask[probe], labels[probe], np.random.default_rng(0), False)[0]
        return self

    def encode(self, windows, batch_size=256):
        """``(mu_S, sigma_S)`` for each window."""
        check_is_fitted(self, "net_")
        mus, sigs = [], []
        for start in range(0, len(windows), batch_size):
            X, mask = pack_windows(windows[start : start + batch_size], self.window)
            h, _ = self.net_(X, mask)
            mus.append(h[:, : self.signal_dim])
            sigs.append(softplus(h[:, self.signal_dim:]))
        if not mus:
            return np.zeros((0, self.signal_dim)), np.ones((0, self.signal_dim))
        return np.vstack(mus), np.vstack(sigs)

    def transform(self, windows):
        return self.encode(windows)[0]


def neighbor_indices(mu_p_i, sigma_p_i, corpus_mu_p, M_max: int):
    """Indices of corpus poses within ``||sigma_p_i / 2||`` of ``mu_p_i``, closest first, at most ``M_max``."""
    d = np.linalg.norm(np.asarray(corpus_mu_p) - np.asarray(mu_p_i), axis=1)
    radius = np.linalg.norm(np.asarray(sigma_p_i) / 2.0)
    inside = np.flatnonzero(d <= radius)
    order = inside[np.lexsort((inside, d[inside]))]
    return order[:M_max]


def build_empirical_distribution(mu_p_i, sigma_p_i, corpus_mu_p, corpus_mu_s, corpus_sigma_s, M_max=16,
                                 n_draws=64, G=None, G_max=4, config: FitConfig = FitConfig(), own=None,
                                 return_info=False):
    """Mixture over the latent signal space for one pose.

    Neighbouring poses (by latent mean distance, within half the pose's latent
    spread, at most ``M_max``) contribute ``n_draws`` samples each from their
    window encodings. A mixture with ``G`` components is fitted, or BIC picks
    ``G`` up to ``G_max`` when ``G`` is None; fits with fewer effective
    components are padded with zero-weight copies. ``own`` = ``(mu_S, sigma_S)``
    is the fallback component when nothing falls inside the radius.
    """
    idx = neighbor_indices(mu_p_i, sigma_p_i, corpus_mu_p, M_max)
    corpus_mu_s = np.asarray(corpus_mu_s, dtype=float)
    corpus_sigma_s = np.asarray(corpus_sigma_s, dtype=float)
    if idx.size:
        comps = np.unique(np.hstack([corpus_mu_s[idx], corpus_sigma_s[idx]]), axis=0)
        fallback = False
    else:
        if own is None:
            raise ValueError("no neighbours inside the radius and no own component given")
        comps = np.hstack([np.atleast_1d(own[0]), np.atleast_1d(own[1])])[None]
        fallback = True
    D = corpus_mu_s.shape[1]
    rng = np.random.default_rng(config.seed)
    samples = np.vstack([m + s * rng.standard_normal((n_draws, D)) for m, s in zip(comps[:, :D], comps[:, D:])])
    if G is None:
        G, _ = bic_select(samples, G_max, config)
    mix = em_fit(samples, min(G, samples.shape[0]), config)
    if mix.n_components < G:
        mix = mix.padded(G)
    if return_info:
        return mix, {"M": int(comps.shape[0]), "fallback": fallback, "G": int(G)}
    return mix


def select_global_components(corpus_mu_p, corpus_sigma_p, corpus_mu_s, corpus_sigma_s, G_max=4, M_max=16,
                             n_probe=24, n_draws=64, config: FitConfig = FitConfig()):
    """One component count for every distribution: the most frequent BIC choice over a probe subsample
    (ties -> fewer components)."""
    rng = np.random.default_rng(config.seed)
    n = len(corpus_mu_p)
    probe = np.sort(rng.choice(n, size=min(n_probe, n), replace=False))
    votes = Counter()
    for i in probe:
        _, info = build_empirical_distribution(
            corpus_mu_p[i], corpus_sigma_p[i], corpus_mu_p, corpus_mu_s, corpus_sigma_s, M_max, n_draws,
            None, G_max, config, own=(corpus_mu_s[i], corpus_sigma_s[i]), return_info=True)
        votes[info["G"]] += 1
    return min(votes, key=lambda g: (-votes[g], g))


def mixture_to_array(mix: GaussianMixture) -> np.ndarray:
    """Flatten a mixture into ``(G, 1 + 2D)`` rows of ``(phi, mu, sigma^2)``."""
    return np.hstack([mix.weights[:, None], mix.means, mix.variances])
