"""Dense stacks, pooled set encoders and constraint heads with analytic gradients.

Everything works on float64 arrays. A forward pass returns ``(output, cache)``;
the matching backward consumes the cache and returns ``(param_grads, input_grad)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class MissingCacheError(RuntimeError):
    pass


def _relu(x):
    return np.maximum(x, 0.0)


ACTIVATIONS = {
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
    "relu": (_relu, lambda x, y: (x > 0).astype(float)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y**2),
    "sigmoid": (expit, lambda x, y: y * (1.0 - y)),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths ``sizes = [in, h1, ..., out]`` and one activation per layer."""

    sizes: tuple
    activations: tuple = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"need at least one layer with positive widths, got {sizes}")
        acts = tuple(self.activations) or ("relu",) * (len(sizes) - 2) + ("identity",)
        if len(acts) != len(sizes) - 1:
            raise ValueError(f"{len(sizes) - 1} layers but {len(acts)} activations")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]


def init_params(spec: NetworkSpec, seed, prefix="", out_scale=1.0) -> dict:
    """Uniform fan-in initialisation: ``U(-a, a)`` with ``a = sqrt(6 / fan_in)`` for relu
    layers and ``sqrt(3 / fan_in)`` otherwise; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, (n_in, n_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        gain = 2.0 if spec.activations[i] == "relu" else 1.0
        a = np.sqrt(3.0 * gain / n_in)
        if i == spec.n_layers - 1:
            a *= out_scale
        params[f"{prefix}W{i}"] = rng.uniform(-a, a, (n_in, n_out))
        params[f"{prefix}b{i}"] = np.zeros(n_out)
    return params


def forward(spec: NetworkSpec, params: dict, x, prefix=""):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"expected input width {spec.n_in}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    h = x.reshape(-1, spec.n_in)
    inputs, pre, post = [], [], []
    for i in range(spec.n_layers):
        inputs.append(h)
        z = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        h = ACTIVATIONS[spec.activations[i]][0](z)
        pre.append(z)
        post.append(h)
    cache = {"inputs": inputs, "pre": pre, "post": post, "lead": lead}
    return h.reshape(*lead, spec.n_out), cache


def backward(spec: NetworkSpec, params: dict, cache, dout, prefix=""):
    if not cache:
        raise MissingCacheError("backward called without a forward cache")
    g = np.asarray(dout, dtype=float).reshape(-1, spec.n_out)
    grads = {}
    for i in reversed(range(spec.n_layers)):
        g = g * ACTIVATIONS[spec.activations[i]][1](cache["pre"][i], cache["post"][i])
        grads[f"{prefix}W{i}"] = cache["inputs"][i].T @ g
        grads[f"{prefix}b{i}"] = g.sum(axis=0)
        g = g @ params[f"{prefix}W{i}"].T
    return grads, g.reshape(*cache["lead"], spec.n_in)


class MLP:
    """Dense stack owning its parameters."""

    def __init__(self, sizes, activations=(), seed=0, out_scale=1.0):
        self.spec = NetworkSpec(tuple(sizes), tuple(activations))
        self.params = init_params(self.spec, seed, out_scale=out_scale)

    def __call__(self, x):
        return forward(self.spec, self.params, x)

    def backward(self, cache, dout):
        return backward(self.spec, self.params, cache, dout)


@dataclass
class SetEncoder:
    """Permutation-invariant encoder: shared element MLP, masked mean+max pooling, head MLP.

    Input ``x`` has shape ``(B, N, F)`` with boolean ``mask`` ``(B, N)``; empty sets pool to zeros.
    """

    n_features: int
    hidden: tuple = (64, 64)
    head: tuple = (128,)
    n_out: int = 32
    seed: int = 0
    params: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        h = tuple(self.hidden)
        self.phi_spec = NetworkSpec((self.n_features,) + h, ("relu",) * len(h))
        self.rho_spec = NetworkSpec((2 * h[-1],) + tuple(self.head) + (self.n_out,))
        if not self.params:
            self.params = {
                **init_params(self.phi_spec, self.seed, "phi."),
                **init_params(self.rho_spec, self.seed + 1, "rho."),
            }

    def pool(self, x, mask):
        x = np.asarray(x, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        B, N, F = x.shape
        e, phi_cache = forward(self.phi_spec, self.params, x.reshape(B * N, F), "phi.")
        e = e.reshape(B, N, self.phi_spec.n_out)
        m = mask[..., None]
        count = mask.sum(axis=1, keepdims=True).astype(float)
        mean = np.where(m, e, 0.0).sum(axis=1) / np.maximum(count, 1.0)
        masked = np.where(m, e, -np.inf)
        arg = np.argmax(masked, axis=1) if N else np.zeros((B, e.shape[2]), dtype=int)
        mx = np.take_along_axis(e, arg[:, None, :], axis=1)[:, 0, :] if N else np.zeros((B, e.shape[2]))
        empty = count[:, 0] == 0
        mx = np.where(empty[:, None], 0.0, mx)
        pooled = np.concatenate([mean, mx], axis=1)
        cache = {"phi": phi_cache, "mask": mask, "count": count, "arg": arg, "empty": empty, "shape": x.shape}
        return pooled, cache

    def pool_backward(self, cache, dpooled):
        B, N, F = cache["shape"]
        H = dpooled.shape[1] // 2
        dmean, dmax = dpooled[:, :H], dpooled[:, H:]
        de = np.where(cache["mask"][..., None], (dmean / np.maximum(cache["count"], 1.0))[:, None, :], 0.0)
        if N:
            dmax = np.where(cache["empty"][:, None], 0.0, dmax)
            b_idx = np.repeat(np.arange(B), H)
            h_idx = np.tile(np.arange(H), B)
            np.add.at(de, (b_idx, cache["arg"].ravel(), h_idx), dmax.ravel())
        grads, dx = backward(self.phi_spec, self.params, cache["phi"], de.reshape(B * N, H), "phi.")
        return grads, dx.reshape(B, N, F)

    def __call__(self, x, mask):
        pooled, pcache = self.pool(x, mask)
        out, rcache = forward(self.rho_spec, self.params, pooled, "rho.")
        return out, {"pool": pcache, "rho": rcache}

    def backward(self, cache, dout):
        grads, dpooled = backward(self.rho_spec, self.params, cache["rho"], dout, "rho.")
        g2, dx = self.pool_backward(cache["pool"], dpooled)
        grads.update(g2)
        return grads, dx


# ---------------------------------------------------------------- heads


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, dy, axis=-1):
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


SOFTPLUS_FLOOR = 1e-6


def softplus(z):
    """``log(1 + exp(z)) + 1e-6``; the floor keeps outputs strictly positive."""
    return np.logaddexp(0.0, z) + SOFTPLUS_FLOOR


def softplus_backward(z, dy):
    return dy * expit(z)


def sigmoid(z):
    return expit(z)


def sigmoid_backward(y, dy):
    return dy * y * (1.0 - y)


def merge_grads(*dicts):
    out = {}
    for d in dicts:
        for k, v in d.items():
            out[k] = out[k] + v if k in out else v
    return out
