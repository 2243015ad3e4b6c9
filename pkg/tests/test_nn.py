import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmjoints.nn import (
    MLP,
    Adam,
    AdamState,
    LossBundle,
    LossTermError,
    MissingCacheError,
    NetworkSpec,
    SetEncoder,
    adam_step,
    backward,
    cross_entropy,
    forward,
    huber,
    init_params,
    kl_to_standard_normal,
    mine_semihard,
    mse,
    opl,
    softmax,
    softmax_backward,
    softplus,
    softplus_backward,
    triplet,
)

EPS = 1e-5


def numgrad(f, x):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + EPS
        fp = f()
        x[i] = old - EPS
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * EPS)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-7, np.abs(a) + np.abs(b)))


def assert_grad(analytic, numeric, tol=1e-4):
    # absolute slack for entries that are numerically zero
    close = np.abs(analytic - numeric) < 1e-8
    err = np.where(close, 0.0, np.abs(analytic - numeric) / np.maximum(1e-7, np.abs(analytic) + np.abs(numeric)))
    assert err.max() < tol, err.max()


# ---------------------------------------------------------------- forward / backward


def test_identity_layer_passes_input():
    spec = NetworkSpec((3, 3), ("identity",))
    params = {"W0": np.eye(3), "b0": np.zeros(3)}
    x = np.array([[1.0, -2.0, 3.0]])
    out, _ = forward(spec, params, x)
    assert np.array_equal(out, x)


def test_zero_relu_layer_outputs_zero():
    spec = NetworkSpec((4, 2), ("relu",))
    params = {"W0": np.zeros((4, 2)), "b0": np.zeros(2)}
    out, _ = forward(spec, params, np.random.default_rng(0).normal(size=(5, 4)))
    assert np.all(out == 0)


def test_forward_deterministic():
    a = MLP((4, 8, 3), seed=11)
    b = MLP((4, 8, 3), seed=11)
    x = np.random.default_rng(1).normal(size=(6, 4))
    assert np.array_equal(a(x)[0], b(x)[0])
    assert np.array_equal(a(x)[0], a(x)[0])


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec((3,))
    with pytest.raises(ValueError):
        NetworkSpec((3, 2), ("relu", "relu"))
    with pytest.raises(ValueError):
        NetworkSpec((3, 2), ("gelu",))


def test_forward_shape_mismatch():
    net = MLP((4, 2))
    with pytest.raises(ValueError):
        net(np.zeros((2, 5)))


def test_backward_requires_cache():
    net = MLP((2, 2))
    with pytest.raises(MissingCacheError):
        net.backward({}, np.zeros((1, 2)))


def test_constant_loss_zero_gradients():
    net = MLP((3, 5, 2), seed=2)
    out, cache = net(np.ones((4, 3)))
    grads, dx = net.backward(cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dx == 0)


def test_linear_scalar_gradient_by_hand():
    spec = NetworkSpec((1, 1), ("identity",))
    w, b, x, y = 1.5, -0.5, 2.0, 0.25
    params = {"W0": np.array([[w]]), "b0": np.array([b])}
    out, cache = forward(spec, params, np.array([[x]]))
    grads, _ = backward(spec, params, cache, 2 * (out - y))
    assert grads["W0"][0, 0] == pytest.approx(2 * (w * x + b - y) * x)


@pytest.mark.parametrize("acts", [("tanh", "relu", "identity"), ("sigmoid", "tanh", "sigmoid")])
def test_three_layer_finite_differences(acts):
    rng = np.random.default_rng(3)
    spec = NetworkSpec((4, 6, 5, 3), acts)
    params = init_params(spec, 5)
    for k in params:
        params[k] += rng.normal(scale=0.1, size=params[k].shape)
    x = rng.normal(size=(7, 4))
    target = rng.normal(size=(7, 3))

    def loss():
        out, _ = forward(spec, params, x)
        return 0.5 * np.sum((out - target) ** 2)

    out, cache = forward(spec, params, x)
    grads, dx = backward(spec, params, cache, out - target)
    for k in params:
        assert_grad(grads[k], numgrad(loss, params[k]))
    assert_grad(dx, numgrad(loss, x))


def test_set_encoder_gradients_and_invariance():
    rng = np.random.default_rng(4)
    enc = SetEncoder(n_features=5, hidden=(6, 7), head=(8,), n_out=3, seed=1)
    x = rng.normal(size=(3, 6, 5))
    mask = rng.random((3, 6)) > 0.3
    mask[2] = False  # empty set
    for k in enc.params:  # move biases off the relu kink
        enc.params[k] += rng.normal(scale=0.1, size=enc.params[k].shape)
    target = rng.normal(size=(3, 3))

    def loss():
        out, _ = enc(x, mask)
        return 0.5 * np.sum((out - target) ** 2)

    out, cache = enc(x, mask)
    grads, dx = enc.backward(cache, out - target)
    for k in enc.params:
        assert_grad(grads[k], numgrad(loss, enc.params[k]))
    assert_grad(dx, numgrad(loss, x))
    assert np.all(dx[~mask] == 0)

    perm = rng.permutation(6)
    out_p, _ = enc(x[:, perm], mask[:, perm])
    np.testing.assert_allclose(out_p, out, atol=1e-12)


def test_set_encoder_accepts_empty_point_axis():
    enc = SetEncoder(n_features=5, hidden=(4,), head=(4,), n_out=2)
    out, cache = enc(np.zeros((2, 0, 5)), np.zeros((2, 0), dtype=bool))
    assert out.shape == (2, 2)
    grads, dx = enc.backward(cache, np.ones((2, 2)))
    assert dx.shape == (2, 0, 5)


# ---------------------------------------------------------------- heads


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(z):
    p = softmax(z)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (10,), elements=st.floats(-800, 800)))
def test_softplus_positive(z):
    assert np.all(softplus(z) > 0)


def test_head_backward_finite_differences():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    assert_grad(softmax_backward(softmax(z), w), numgrad(lambda: np.sum(w * softmax(z)), z))
    assert_grad(softplus_backward(z, w), numgrad(lambda: np.sum(w * softplus(z)), z))


# ---------------------------------------------------------------- losses


def test_loss_examples():
    x = np.arange(6.0).reshape(2, 3)
    assert mse(x, x)[0] == 0
    assert huber(np.array([0.5]), np.array([0.0]))[0] == pytest.approx(0.125)
    assert huber(np.array([3.0]), np.array([0.0]))[0] == pytest.approx(2.5)
    assert kl_to_standard_normal(np.zeros((2, 3)), np.ones((2, 3)))[0] == 0
    a = np.array([[0.0, 0.0]])
    assert triplet(a, a, np.array([[5.0, 0.0]]), margin=1.0)[0] == 0


def test_opl_orthogonal_identical_is_zero():
    f = np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 3.0, 0], [0, 0.5, 0], [0, 0, 1.0]])
    val, grad, L_d, L_s = opl(f, np.array([0, 0, 1, 1, 2]))
    assert L_d == pytest.approx(0, abs=1e-12)
    assert L_s == pytest.approx(0, abs=1e-12)


def test_opl_single_class_raises():
    with pytest.raises(LossTermError):
        opl(np.ones((3, 2)), np.zeros(3))


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        huber(np.zeros((2, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((3, 2)), np.zeros(2))


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)) * 2
    assert_grad(mse(p, t)[1], numgrad(lambda: mse(p, t)[0], p))
    assert_grad(huber(p, t)[1], numgrad(lambda: huber(p, t)[0], p))

    mu, sig = rng.normal(size=(4, 3)), rng.uniform(0.3, 2.0, size=(4, 3))
    _, dmu, dsig = kl_to_standard_normal(mu, sig)
    assert_grad(dmu, numgrad(lambda: kl_to_standard_normal(mu, sig)[0], mu))
    assert_grad(dsig, numgrad(lambda: kl_to_standard_normal(mu, sig)[0], sig))

    a, pp, n = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    _, da, dp, dn = triplet(a, pp, n, 0.2)
    assert_grad(da, numgrad(lambda: triplet(a, pp, n, 0.2)[0], a))
    assert_grad(dp, numgrad(lambda: triplet(a, pp, n, 0.2)[0], pp))
    assert_grad(dn, numgrad(lambda: triplet(a, pp, n, 0.2)[0], n))

    logits, labels = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
    assert_grad(cross_entropy(logits, labels)[1], numgrad(lambda: cross_entropy(logits, labels)[0], logits))

    f = rng.normal(size=(6, 4))
    lab = np.array([0, 0, 1, 1, 2, 2])
    assert_grad(opl(f, lab)[1], numgrad(lambda: opl(f, lab)[0], f))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    assert mse(p, t)[0] >= 0
    assert huber(p, t)[0] >= 0
    assert kl_to_standard_normal(p, rng.uniform(0.1, 3, (3, 2)))[0] >= -1e-12
    assert triplet(p, t, rng.normal(size=(3, 2)))[0] >= 0
    assert cross_entropy(p, np.array([0, 1, 0]))[0] >= 0
    assert opl(p, np.array([0, 1, 1]))[0] >= 0


def test_semihard_mining_returns_valid_triplets():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 3))
    lab = np.repeat([0, 1, 2], 4)
    a, p, n = mine_semihard(x, lab)
    assert len(a) == 12
    assert np.all(lab[a] == lab[p]) and np.all(a != p)
    assert np.all(lab[a] != lab[n])


def test_loss_bundle_rejects_negative():
    assert LossBundle().weights()["lambda_step3"] == 0.5
    with pytest.raises(ValueError):
        LossBundle(lambda_div=-1.0)


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_and_zero_lr():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])
    adam_step(p, {"w": np.array([3.0, 3.0])}, AdamState(), lr=0.0)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_constant_gradient_moves_opposite():
    p = {"w": np.array([0.0, 0.0])}
    opt = Adam(p, lr=0.01)
    for _ in range(100):
        opt.step({"w": np.array([2.0, -0.5])})
    assert p["w"][0] < 0 < p["w"][1]
    # bias-corrected steps are ~lr each under a constant gradient
    np.testing.assert_allclose(np.abs(p["w"]), 1.0, rtol=1e-3)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


def test_adam_fits_regression():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]])
    net = MLP((3, 8, 1), seed=0)
    opt = Adam(net.params, lr=1e-2)
    losses = []
    for _ in range(50):
        out, cache = net(x)
        val, g = mse(out, y)
        losses.append(val)
        opt.step(net.backward(cache, g)[0])
    assert losses[-1] < losses[0]
