"""Pose-to-signal-distribution generator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..nn import MLP, Adam, SetEncoder, minibatches, softmax, softmax_backward, softplus, softplus_backward
from ..stats import GaussianMixture, jensen_bound_grad, lap_loss_grad
from .pose import PoseBasis, decompose_pose
from .signal import mixture_to_array


def basis_elements(basis: PoseBasis):
    """``(D_p * G, D_C)`` rows ``(phi, mu, sigma^2)`` of the basis-attached mixtures and their column ids."""
    rows = [mixture_to_array(m) for m in basis.distributions]
    owner = np.repeat(np.arange(len(rows)), [r.shape[0] for r in rows])
    return np.vstack(rows), owner


class DistributionGenerator(BaseEstimator):
    """Maps a latent pose to a ``G``-component mixture over the latent signal space.

    The pose is decomposed in the basis; every basis mixture component, tagged
    with its column's coordinate, becomes one element of a pooled set feature
    that is concatenated with the coordinates. Weights come from a softmax head
    and variances from a softplus head.

    Parameters
    ----------
    n_components : int
    signal_dim : int
    hidden : tuple
    set_hidden, set_out : element stack widths and pooled feature size
    epochs, batch_size, lr : training schedule
    lambda_div : float
        Weight of the divergence bound between the window's signal encoding and
        the generated mixture.
    random_state : int
    """

    def __init__(self, n_components=2, signal_dim=16, hidden=(128, 128), set_hidden=(32,), set_out=32, epochs=30,
                 batch_size=32, lr=2e-3, lambda_div=1e-2, random_state=0):
        self.n_components = n_components
        self.signal_dim = signal_dim
        self.hidden = hidden
        self.set_hidden = set_hidden
        self.set_out = set_out
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_div = lambda_div
        self.random_state = random_state

    def _init(self, basis: PoseBasis):
        self.basis_ = basis
        elems, owner = basis_elements(basis)
        if elems.shape[1] != 1 + 2 * self.signal_dim:
            raise ValueError(f"basis mixtures have width {elems.shape[1]}, expected {1 + 2 * self.signal_dim}")
        self.elements_ = elems
        self.owner_ = owner
        D_p = basis.dim
        G, D = self.n_components, self.signal_dim
        self.set_ = SetEncoder(elems.shape[1] + 1, tuple(self.set_hidden), (), self.set_out, seed=self.random_state)
        self.mlp_ = MLP((D_p + self.set_out,) + tuple(self.hidden) + (G * (1 + 2 * D),), seed=self.random_state + 1,
                        out_scale=0.1)

    def _forward(self, latent):
        omega = decompose_pose(np.atleast_2d(latent), self.basis_)
        B = omega.shape[0]
        elems = np.broadcast_to(self.elements_, (B,) + self.elements_.shape)
        x = np.concatenate([elems, omega[:, self.owner_][..., None]], axis=2)
        mask = np.ones(x.shape[:2], dtype=bool)
        fs, scache = self.set_(x, mask)
        raw, mcache = self.mlp_(np.hstack([omega, fs]))
        G, D = self.n_components, self.signal_dim
        raw = raw.reshape(B, G, 1 + 2 * D)
        phi = softmax(raw[:, :, 0])
        mu = raw[:, :, 1 : 1 + D]
        var = softplus(raw[:, :, 1 + D:])
        return (phi, mu, var), (raw, scache, mcache)

    def _backward(self, cache, phi, d_phi, d_mu, d_var):
        raw, scache, mcache = cache
        D = self.signal_dim
        draw = np.zeros_like(raw)
        draw[:, :, 0] = softmax_backward(phi, d_phi)
        draw[:, :, 1 : 1 + D] = d_mu
        draw[:, :, 1 + D:] = softplus_backward(raw[:, :, 1 + D:], d_var)
        g_mlp, dx = self.mlp_.backward(mcache, draw.reshape(raw.shape[0], -1))
        g_set, _ = self.set_.backward(scache, dx[:, self.basis_.dim:])
        return {**{"mlp." + k: v for k, v in g_mlp.items()}, **{"set." + k: v for k, v in g_set.items()}}

    def _params(self):
        return {**{"mlp." + k: v for k, v in self.mlp_.params.items()},
                **{"set." + k: v for k, v in self.set_.params.items()}}

    def loss(self, latent, targets, mu_s, var_s, with_grad=False):
        """Mean LAP loss plus ``lambda_div`` times the mean divergence bound.

        ``targets`` is ``(B, G, 1 + 2D)`` from :func:`mixture_to_array`.
        """
        (phi, mu, var), cache = self._forward(latent)
        B = phi.shape[0]
        D = self.signal_dim
        d_phi, d_mu, d_var = np.zeros_like(phi), np.zeros_like(mu), np.zeros_like(var)
        lap = 0.0
        for b in range(B):
            t = targets[b]
            val, _, gp, gm, gv = lap_loss_grad(phi[b], mu[b], var[b], t[:, 0], t[:, 1 : 1 + D], t[:, 1 + D:])
            lap += val
            d_phi[b], d_mu[b], d_var[b] = gp, gm, gv
        div, gp, gm, gv = jensen_bound_grad(mu_s, var_s, phi, mu, var)
        total = lap / B + self.lambda_div * float(div.mean())
        if not with_grad:
            return total, lap / B, float(div.mean())
        d_phi = d_phi / B + self.lambda_div * gp / B
        d_mu = d_mu / B + self.lambda_div * gm / B
        d_var = d_var / B + self.lambda_div * gv / B
        return total, self._backward(cache, phi, d_phi, d_mu, d_var)

    def fit(self, latent, targets, mu_s, sigma_s, basis: PoseBasis):
        """Train on latent poses with their empirical target mixtures and window encodings."""
        latent = np.asarray(latent, dtype=float)
        targets = np.asarray(targets, dtype=float)
        if targets.shape[1:] != (self.n_components, 1 + 2 * self.signal_dim):
            raise ValueError(f"targets must be (B, {self.n_components}, {1 + 2 * self.signal_dim}), got {targets.shape}")
        var_s = np.asarray(sigma_s, dtype=float) ** 2
        self._init(basis)
        params = self._params()
        opt = Adam(params, lr=self.lr)
        rng = np.random.default_rng(self.random_state)
        probe = np.arange(min(256, len(latent)))
        self.initial_loss_ = self.loss(latent[probe], targets[probe], mu_s[probe], var_s[probe])
        self.history_ = []
        for _ in range(self.epochs):
            tot = 0.0
            for idx in minibatches(len(latent), self.batch_size, rng):
                val, grads = self.loss(latent[idx], targets[idx], mu_s[idx], var_s[idx], with_grad=True)
                opt.step(grads)
                tot += val * len(idx)
            self.history_.append(tot / len(latent))
        self.final_loss_ = self.loss(latent[probe], targets[probe], mu_s[probe], var_s[probe])
        return self

    def generate(self, latent):
        """Arrays ``(phi (B, G), mu (B, G, D), var (B, G, D))``."""
        check_is_fitted(self, "mlp_")
        return self._forward(latent)[0]


def generate_latent_distribution(latent, generator: DistributionGenerator) -> GaussianMixture:
    phi, mu, var = generator.generate(np.atleast_2d(latent))
    return GaussianMixture.from_variances(phi[0], mu[0], var[0])
