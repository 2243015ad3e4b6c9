from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """In-place Adam update with bias correction. Parameters without a gradient are left alone."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.state = AdamState(beta1, beta2, eps)

    def step(self, grads: dict):
        adam_step(self.params, grads, self.state, self.lr)


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def holdout_split(n, fraction, block=36):
    """Train/validation indices made of contiguous row blocks.

    Rows of sequential data are ordered by clip, so whole blocks keep
    near-duplicate neighbouring windows on one side, while taking every k-th
    block spreads the validation rows over all activities.
    """
    n_val_target = int(round(n * fraction)) if fraction > 0 else 0
    if n_val_target == 0 or n - n_val_target < 1:
        return np.arange(n), np.arange(0)
    n_blocks = -(-n // block)
    stride = max(2, int(round(1.0 / fraction)))
    if n_blocks < stride:
        return np.arange(n - n_val_target), np.arange(n - n_val_target, n)
    is_val = (np.arange(n) // block) % stride == stride - 1
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


class BestSnapshot:
    """Keeps a copy of the parameters with the lowest validation loss seen so far."""

    def __init__(self, params: dict):
        self.params = params
        self.best = np.inf
        self.epoch = -1
        self._saved = None

    def update(self, loss, epoch):
        if loss < self.best:
            self.best = float(loss)
            self.epoch = epoch
            self._saved = {k: v.copy() for k, v in self.params.items()}

    def restore(self):
        if self._saved is not None:
            for k, v in self._saved.items():
                self.params[k][...] = v
        return self
