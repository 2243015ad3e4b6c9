"""Signal-consistent surrogate pose construction in the latent pose space."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..nn import MLP, Adam, BestSnapshot, SetEncoder, holdout_split, huber, minibatches
from ..stats import jeffrey_terms


def divergence_terms(mu_s, sigma_s, phi, mu, var):
    """Per-component ``phi_i * J(N(mu_s, sigma_s^2), component_i)``, shape ``(B, G)``."""
    return phi * jeffrey_terms(mu_s, np.asarray(sigma_s) ** 2, mu, var)


class SurrogateRefiner(BaseEstimator):
    """Two-stage residual network producing the refined latent pose.

    Inputs are the estimator's latent pose, optionally the pooled divergence
    feature (per-component terms scaled by ``log(1 + x / s)``) and optionally
    the window's mean signal encoding as an anchor. Stage one proposes an
    intermediate latent pose (regularised by ``lambda_inter``), stage two fuses
    it with the same inputs into the final one.

    Parameters
    ----------
    use_divergence, use_signal : bool
    hidden : tuple
    div_hidden, div_out : divergence set-stack widths
    epochs, batch_size, lr : training schedule
    lambda_inter : float
    delta : float
        Huber threshold in latent units.
    validation_fraction : float
        Share of the training rows (interleaved blocks) held out to pick the best epoch
        (the untrained near-identity network is a candidate too).
    random_state : int
    """

    def __init__(self, use_divergence=True, use_signal=True, hidden=(128, 128), div_hidden=(16,), div_out=16,
                 epochs=60, batch_size=32, lr=1e-3, lambda_inter=0.1, delta=1.0, validation_fraction=0.15, random_state=0):
        self.use_divergence = use_divergence
        self.use_signal = use_signal
        self.hidden = hidden
        self.div_hidden = div_hidden
        self.div_out = div_out
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_inter = lambda_inter
        self.delta = delta
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _scaled(self, terms):
        return np.log1p(np.asarray(terms, dtype=float) / self.scale_)

    def _forward(self, p_pred, terms, mu_s):
        parts = [p_pred]
        caches = {}
        if self.use_divergence:
            t = self._scaled(terms)[..., None]
            f_div, caches["div"] = self.div_(t, np.ones(t.shape[:2], dtype=bool))
            parts.append(f_div)
        if self.use_signal:
            parts.append(mu_s)
        x = np.hstack(parts)
        d1, caches["s1"] = self.stage1_(x)
        inter = p_pred + d1
        d2, caches["s2"] = self.stage2_(np.hstack([inter, x]))
        return inter, inter + d2, caches, x.shape[1]

    def _params(self):
        out = {**{"s1." + k: v for k, v in self.stage1_.params.items()},
               **{"s2." + k: v for k, v in self.stage2_.params.items()}}
        if self.use_divergence:
            out.update({"div." + k: v for k, v in self.div_.params.items()})
        return out

    def _loss(self, p_pred, terms, mu_s, target, with_grad=False):
        inter, final, caches, width = self._forward(p_pred, terms, mu_s)
        l_final, g_final = huber(final, target, self.delta)
        l_inter, g_inter = huber(inter, target, self.delta)
        total = l_final + self.lambda_inter * l_inter
        if not with_grad:
            return total
        D = p_pred.shape[1]
        g2, dx2 = self.stage2_.backward(caches["s2"], g_final)
        d_inter = g_final + self.lambda_inter * g_inter + dx2[:, :D]
        dx = dx2[:, D:]
        g1, dx1 = self.stage1_.backward(caches["s1"], d_inter)
        dx = dx + dx1
        grads = {**{"s1." + k: v for k, v in g1.items()}, **{"s2." + k: v for k, v in g2.items()}}
        if self.use_divergence:
            gd, _ = self.div_.backward(caches["div"], dx[:, D : D + self.div_out])
            grads.update({"div." + k: v for k, v in gd.items()})
        return total, grads

    def _inputs(self, terms, mu_s, n):
        if terms is None:
            terms = np.zeros((n, 1))
        if mu_s is None:
            mu_s = np.zeros((n, 0))
        return np.asarray(terms, dtype=float), np.asarray(mu_s, dtype=float)

    def fit(self, p_pred, terms, mu_s, target):
        p_pred = np.asarray(p_pred, dtype=float)
        target = np.asarray(target, dtype=float)
        terms, mu_s = self._inputs(terms, mu_s, len(p_pred))
        self.n_components_ = terms.shape[1]
        positive = terms[terms > 0]
        self.scale_ = float(np.median(positive)) if positive.size else 1.0
        D = p_pred.shape[1]
        width = D + (self.div_out if self.use_divergence else 0) + (mu_s.shape[1] if self.use_signal else 0)
        self.div_ = SetEncoder(1, tuple(self.div_hidden), (), self.div_out, seed=self.random_state + 2)
        self.stage1_ = MLP((width,) + tuple(self.hidden) + (D,), seed=self.random_state, out_scale=0.1)
        self.stage2_ = MLP((width + D,) + tuple(self.hidden) + (D,), seed=self.random_state + 1, out_scale=0.1)
        params = self._params()
        opt = Adam(params, lr=self.lr)
        rng = np.random.default_rng(self.random_state)
        tr, va = holdout_split(len(p_pred), self.validation_fraction)
        snap = BestSnapshot(params)
        self.initial_loss_ = self._loss(p_pred, terms, mu_s, target)
        if len(va):
            snap.update(self._loss(p_pred[va], terms[va], mu_s[va], target[va]), 0)
        self.history_ = []
        for epoch in range(self.epochs):
            tot = 0.0
            for b in minibatches(len(tr), self.batch_size, rng):
                idx = tr[b]
                val, grads = self._loss(p_pred[idx], terms[idx], mu_s[idx], target[idx], with_grad=True)
                opt.step(grads)
                tot += val * len(idx)
            self.history_.append(tot / len(tr))
            if len(va):
                snap.update(self._loss(p_pred[va], terms[va], mu_s[va], target[va]), epoch + 1)
        if len(va):
            snap.restore()
        self.best_epoch_ = snap.epoch if len(va) else self.epochs
        self.final_loss_ = self._loss(p_pred, terms, mu_s, target)
        return self

    def predict(self, p_pred, terms=None, mu_s=None):
        check_is_fitted(self, "stage1_")
        p_pred = np.atleast_2d(np.asarray(p_pred, dtype=float))
        terms, mu_s = self._inputs(terms, mu_s, len(p_pred))
        if self.use_divergence and terms.shape[1] != self.n_components_:
            raise ValueError(f"refiner was trained with {self.n_components_} components, got {terms.shape[1]}")
        return self._forward(p_pred, terms, mu_s)[1]


def construct_surrogate(mu_s, sigma_s, latent_mixture, p_pred, refiner: SurrogateRefiner):
    """Refined latent pose for one window from its signal encoding and generated mixture."""
    phi, mu, var = latent_mixture
    terms = divergence_terms(np.atleast_2d(mu_s), np.atleast_2d(sigma_s), np.atleast_2d(phi),
                             np.asarray(mu).reshape(np.atleast_2d(phi).shape + (-1,)),
                             np.asarray(var).reshape(np.atleast_2d(phi).shape + (-1,)))
    return refiner.predict(np.atleast_2d(p_pred), terms, np.atleast_2d(mu_s))[0]
