import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmjoints.analysis import basis_reconstruction_error, held_out_margin
from mmjoints.latent import (
    BasisError,
    DescriptorHead,
    DistributionGenerator,
    LatentHyperparams,
    PoseBasis,
    PoseVAE,
    SignalEncoder,
    SurrogateRefiner,
    build_empirical_distribution,
    build_pose_basis,
    cluster_poses,
    construct_surrogate,
    decompose_pose,
    divergence_terms,
    fine_tune_opl,
    frame_features,
    generate_latent_distribution,
    mean_inter_class_cosine,
    mixture_to_array,
    select_basis_clusters,
)
from mmjoints.nn import LossTermError
from mmjoints.simulator import ACTIVITIES, RadarConfig, SimulationConfig, WindowLengthError, make_windows, \
    simulate_records, synth_motion
from mmjoints.stats import FitConfig, GaussianMixture, jensen_upper_bound, DiagonalGaussian


def _motion_poses(n_per=120, seed=0):
    clips = [synth_motion(a, n_per / 10.0, seed=seed + i) for i, a in enumerate(ACTIVITIES)]
    return np.concatenate([c.frames for c in clips]), np.repeat(np.arange(len(ACTIVITIES)), n_per)


@pytest.fixture(scope="module")
def windows():
    sim = SimulationConfig(clips_per_activity={"pretrain": 0, "train": 2, "val": 0, "test": 1}, duration_s=3.0, seed=2)
    recs = simulate_records(sim, RadarConfig())
    return make_windows(recs, 5, "train"), make_windows(recs, 5, "test")


# -- clustering and basis selection -------------------------------------------

def test_cluster_recovers_archetypes():
    rng = np.random.default_rng(0)
    D = 4
    archetypes = rng.normal(size=(D, 6)) * 10
    X = np.repeat(archetypes, 100, axis=0) + rng.normal(size=(D * 100, 6)) * 0.01
    model, labels = cluster_poses(X, D, 8, FitConfig(seed=0))
    assert model.n_components == D
    truth = np.repeat(np.arange(D), 100)
    for k in range(D):
        assert np.unique(labels[truth == k]).size == 1
    assert np.unique(labels).size == D


def test_cluster_forced_single_and_too_few():
    X = np.ones((20, 6))
    _, labels = cluster_poses(X, 1, 4, n_components=1)
    assert np.all(labels == labels[0])
    with pytest.raises(ValueError):
        cluster_poses(np.zeros((3, 6)), 8)


def test_select_basis_clusters_examples():
    assert list(select_basis_clusters([[1.0], [10.0]], [100, 5], [0.0], 1)) == [0]
    # equal sizes rank by distance alone
    assert list(select_basis_clusters([[1.0], [3.0], [2.0]], [7, 7, 7], [0.0], 2)) == [1, 2]
    # exact score tie goes to the lower id
    assert list(select_basis_clusters([[2.0], [1.0]], [5, 10], [0.0], 1)) == [0]
    with pytest.raises(ValueError):
        select_basis_clusters([[1.0]], [3], [0.0], 2)


# -- pose VAE and orthogonality fine-tuning -----------------------------------

def test_vae_reconstruction_improves():
    poses, _ = _motion_poses(112)
    vae = PoseVAE(8, epochs=30, random_state=7).fit(poses[:1000])
    X = vae._standardize(poses[:1000])
    final_rec = vae._loss_value(X, np.random.default_rng(14))[1]
    assert final_rec < 0.5 * vae.initial_loss_[1]
    rec = vae.decode(vae.transform(poses[:1000]))
    assert np.mean((rec - poses[:1000]) ** 2) < poses[:1000].reshape(1000, -1).var(axis=0).mean()


def test_vae_zero_kl_weight():
    poses, _ = _motion_poses(20)
    vae = PoseVAE(4, epochs=1, lambda_kl=0.0).fit(poses)
    total, rec, kl = vae._loss_value(vae._standardize(poses), np.random.default_rng(0))
    assert total == rec and kl > 0
    mu, sigma = vae.encode(poses)
    assert np.all(sigma > 0) and mu.shape == (len(poses), 4)


def test_opl_fine_tuning_orthogonalises_cluster_means():
    poses, labels = _motion_poses(40)
    vae = PoseVAE(8, epochs=10, random_state=0).fit(poses)
    sel = labels < 8
    before = mean_inter_class_cosine(vae.transform(poses[sel]), labels[sel])[0]
    tuned = fine_tune_opl(vae, poses[sel], labels[sel], 0.5, epochs=150, lr=3e-3, seed=0)
    after = mean_inter_class_cosine(tuned.transform(poses[sel]), labels[sel])[0]
    assert after < before and after < 0.1
    # the original model is untouched
    np.testing.assert_array_equal(vae.transform(poses[:3]), vae.transform(poses[:3]))


def test_opl_single_class_rejected():
    poses, _ = _motion_poses(10)
    vae = PoseVAE(4, epochs=1).fit(poses)
    with pytest.raises(LossTermError):
        fine_tune_opl(vae, poses, np.zeros(len(poses), dtype=int))


# -- basis algebra -------------------------------------------------------------

def test_basis_of_orthonormal_columns_is_unchanged():
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    basis = build_pose_basis(Q)
    np.testing.assert_allclose(basis.matrix, Q, atol=1e-12)
    np.testing.assert_allclose(np.linalg.inv(basis.matrix) @ basis.matrix, np.eye(5), atol=1e-9)


def test_basis_gram_schmidt_and_rank_deficiency():
    F = np.random.default_rng(1).normal(size=(6, 6))
    basis = build_pose_basis(F)
    off = basis.matrix.T @ basis.matrix - np.eye(6)
    assert np.abs(off).max() < 1e-10
    assert basis_reconstruction_error(np.random.default_rng(2).normal(size=(10, 6)), basis).max() < 1e-9
    F[:, 3] = F[:, 1] * 2.0
    with pytest.raises(BasisError):
        build_pose_basis(F)
    with pytest.raises(BasisError):
        PoseBasis(np.ones((2, 3)), np.ones((2, 3)))


def test_decompose_examples():
    basis = build_pose_basis(np.random.default_rng(3).normal(size=(4, 4)))
    np.testing.assert_allclose(decompose_pose(basis.matrix[:, 2], basis), np.eye(4)[2], atol=1e-12)
    np.testing.assert_array_equal(decompose_pose(np.zeros(4), basis), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10))
def test_decompose_round_trip(seed, dim):
    rng = np.random.default_rng(seed)
    basis = build_pose_basis(rng.normal(size=(dim, dim)))
    coords = rng.normal(size=(3, dim))
    p = coords @ basis.matrix.T
    np.testing.assert_allclose(decompose_pose(p, basis), coords, atol=1e-6)
    back = decompose_pose(p, basis) @ basis.matrix.T
    assert np.linalg.norm(back - p) <= 1e-6 * max(1.0, np.linalg.norm(p))


# -- signal encoder and empirical distributions -------------------------------

def test_signal_encoder_training(windows):
    train, test = windows
    enc = SignalEncoder(8, 5, epochs=40, random_state=0).fit(train.windows, train.labels)
    assert enc.final_loss_ < enc.initial_loss_
    mu, sigma = enc.encode(test.windows)
    assert np.all(sigma > 0)
    assert held_out_margin(mu, test.labels, 500) > 0
    with pytest.raises(WindowLengthError):
        enc.encode([train.windows[0][:4]])


def test_signal_encoder_permutation_invariant(windows):
    train, _ = windows
    enc = SignalEncoder(4, 5, epochs=1).fit(train.windows[:64], train.labels[:64])
    rng = np.random.default_rng(0)
    w = train.windows[3]
    perm = [f[rng.permutation(len(f))] for f in w]
    np.testing.assert_allclose(enc.transform([w]), enc.transform([perm]), atol=1e-10)


def test_signal_encoder_kl_only_pulls_to_standard_normal(windows):
    train, _ = windows
    kw = dict(epochs=15, lambda_triplet=0.0, lambda_ce=0.0, lambda_kl=1.0, random_state=0)
    before = SignalEncoder(4, 5, **{**kw, "epochs": 0}).fit(train.windows, train.labels)
    after = SignalEncoder(4, 5, **kw).fit(train.windows, train.labels)

    def gap(enc):
        mu, sigma = enc.encode(train.windows)
        return np.mean(mu ** 2) + np.mean((sigma - 1.0) ** 2)

    assert gap(after) < gap(before)


def test_empirical_distribution_repeated_corpus():
    mu_p = np.zeros((10, 3))
    mu_s = np.tile([1.0, -2.0], (10, 1))
    sig_s = np.full((10, 2), 0.5)
    mix, info = build_empirical_distribution(mu_p[0], np.ones(3), mu_p, mu_s, sig_s, G=1, return_info=True)
    assert info["M"] == 1 and not info["fallback"]
    np.testing.assert_allclose(mix.means[0], [1.0, -2.0], atol=0.15)
    np.testing.assert_allclose(mix.stds[0], [0.5, 0.5], atol=0.1)


def test_empirical_distribution_fallback():
    rng = np.random.default_rng(0)
    mu_p = rng.normal(size=(10, 3)) * 10
    query = np.array([100.0, 100.0, 100.0])
    own = (np.array([3.0, 3.0]), np.array([0.2, 0.2]))
    mix, info = build_empirical_distribution(query, np.full(3, 1e-3), mu_p, rng.normal(size=(10, 2)),
                                             np.ones((10, 2)), G=2, own=own, return_info=True)
    assert info["fallback"] and info["M"] == 1 and mix.n_components == 2
    with pytest.raises(ValueError):
        build_empirical_distribution(query, np.full(3, 1e-3), mu_p, np.zeros((10, 2)), np.ones((10, 2)))


def test_empirical_distribution_two_modes_select_two():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        mu_p = rng.normal(size=(8, 3)) * 0.01
        mu_s = np.where(np.arange(8)[:, None] % 2 == 0, -4.0, 4.0) + rng.normal(size=(8, 2)) * 0.05
        _, info = build_empirical_distribution(mu_p[0], np.ones(3), mu_p, mu_s, np.full((8, 2), 0.5), G=None,
                                               G_max=4, config=FitConfig(seed=seed), return_info=True)
        hits += info["G"] == 2
    assert hits >= 18


# -- generator -----------------------------------------------------------------

def _toy_basis(dim=3, G=2, D=2, seed=0):
    rng = np.random.default_rng(seed)
    dists = [GaussianMixture.from_variances(np.full(G, 1.0 / G), rng.normal(size=(G, D)), np.ones((G, D)))
             for _ in range(dim)]
    return build_pose_basis(rng.normal(size=(dim, dim)), dists, range(dim), D)


def _toy_targets(n, G=2, D=2, seed=1):
    rng = np.random.default_rng(seed)
    phi = rng.dirichlet(np.ones(G), size=n)
    return np.concatenate([phi[..., None], rng.normal(size=(n, G, D)), rng.uniform(0.5, 2, (n, G, D))], axis=2)


def test_generator_output_constraints_untrained():
    gen = DistributionGenerator(2, 2, epochs=0).fit(np.zeros((1, 3)), _toy_targets(1), np.zeros((1, 2)),
                                                   np.ones((1, 2)), _toy_basis())
    phi, mu, var = gen.generate(np.random.default_rng(0).normal(size=(1000, 3)) * 5)
    np.testing.assert_allclose(phi.sum(axis=1), 1.0)
    assert np.all(var > 0)
    a, b = gen.generate(np.ones((1, 3)) * 0.3), gen.generate(np.ones((1, 3)) * 0.3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert isinstance(generate_latent_distribution(np.ones(3), gen), GaussianMixture)


def test_generator_shape_mismatch():
    with pytest.raises(ValueError):
        DistributionGenerator(3, 2).fit(np.zeros((1, 3)), _toy_targets(1), np.zeros((1, 2)), np.ones((1, 2)),
                                        _toy_basis())


def test_generator_overfits_single_pose():
    latent = np.array([[0.3, -0.2, 0.5]])
    tgt = _toy_targets(1)
    gen = DistributionGenerator(2, 2, epochs=400, lr=3e-3, lambda_div=0.0, batch_size=1, random_state=0)
    gen.fit(latent, tgt, np.zeros((1, 2)), np.ones((1, 2)), _toy_basis())
    assert gen.final_loss_[1] < 0.1 * gen.initial_loss_[1]
    assert gen.final_loss_[0] == gen.final_loss_[1]


def test_generator_discriminates_own_signal():
    rng = np.random.default_rng(0)
    n = 200
    latent = rng.normal(size=(n, 3))
    W = rng.normal(size=(3, 2))
    mu_s = latent @ W
    sig_s = np.full((n, 2), 0.3)
    tgt = np.stack([np.column_stack([np.ones(1), m[None], np.full((1, 2), 0.09)]) for m in mu_s])
    gen = DistributionGenerator(1, 2, epochs=80, random_state=0).fit(latent[:150], tgt[:150], mu_s[:150],
                                                                   sig_s[:150], _toy_basis(G=1))
    wins = 0
    for i in range(150, n):
        j = 150 + (i - 150 + 7) % 50
        mix = generate_latent_distribution(latent[i], gen)
        own = jensen_upper_bound(DiagonalGaussian(mu_s[i], sig_s[i]), mix)[0]
        other = jensen_upper_bound(DiagonalGaussian(mu_s[j], sig_s[j]), mix)[0]
        wins += own < other
    assert wins >= 0.8 * 50


def test_generator_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    latent = rng.normal(size=(3, 3))
    tgt = _toy_targets(3)
    mu_s, var_s = rng.normal(size=(3, 2)), rng.uniform(0.5, 1.5, (3, 2))
    gen = DistributionGenerator(2, 2, hidden=(8,), set_hidden=(4,), set_out=4, epochs=0, lambda_div=0.5)
    gen.fit(latent, tgt, mu_s, np.sqrt(var_s), _toy_basis())
    _, grads = gen.loss(latent, tgt, mu_s, var_s, with_grad=True)
    params = gen._params()
    eps = 1e-6
    for name in ("mlp.W0", "mlp.b1", "set.phi.W0", "set.rho.W0"):
        P = params[name]
        flat = P.reshape(-1)
        for k in rng.choice(flat.size, size=min(8, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + eps
            fp = gen.loss(latent, tgt, mu_s, var_s)[0]
            flat[k] = old - eps
            fm = gen.loss(latent, tgt, mu_s, var_s)[0]
            flat[k] = old
            num = (fp - fm) / (2 * eps)
            ana = grads[name].reshape(-1)[k]
            assert abs(num - ana) <= 1e-4 * max(1e-6, abs(num) + abs(ana)) + 1e-8, (name, k, num, ana)


# -- surrogate refiner -----------------------------------------------------------

def _biased_latent(n, rng, bias):
    target = rng.normal(size=(n, 4))
    mu_s = target @ rng.normal(size=(4, 6)) * 0 + target[:, :1] * np.ones(6)
    pred = target + bias + rng.normal(size=(n, 4)) * 0.1
    terms = np.abs(rng.normal(size=(n, 2)))
    return pred, terms, mu_s, target


def test_refiner_reduces_error_for_biased_estimator():
    rng = np.random.default_rng(0)
    bias = np.array([1.0, -0.5, 0.8, 0.0])
    tr = _biased_latent(400, rng, bias)
    te = _biased_latent(100, rng, bias)
    ref = SurrogateRefiner(epochs=30, random_state=0).fit(*tr)
    out = ref.predict(*te[:3])
    assert np.mean((out - te[3]) ** 2) < np.mean((te[0] - te[3]) ** 2)
    np.testing.assert_array_equal(out, ref.predict(*te[:3]))
    with pytest.raises(ValueError):
        ref.predict(te[0], np.ones((100, 3)), te[2])


def test_refiner_zero_intermediate_weight():
    rng = np.random.default_rng(1)
    p, t, m, y = _biased_latent(20, rng, 0.0)
    ref = SurrogateRefiner(epochs=0, lambda_inter=0.0).fit(p, t, m, y)
    from mmjoints.nn import huber
    _, final, _, _ = ref._forward(p, t, m)
    assert ref._loss(p, t, m, y) == pytest.approx(huber(final, y, ref.delta)[0])


def test_construct_surrogate_single_window():
    rng = np.random.default_rng(2)
    p, t, m, y = _biased_latent(50, rng, 0.3)
    mu_s, sig_s = rng.normal(size=(50, 6)), np.ones((50, 6))
    phi = np.full((50, 2), 0.5)
    mu, var = rng.normal(size=(50, 2, 6)), np.ones((50, 2, 6))
    terms = divergence_terms(mu_s, sig_s, phi, mu, var)
    assert terms.shape == (50, 2) and np.all(terms >= 0)
    ref = SurrogateRefiner(epochs=2).fit(p, terms, mu_s, y)
    one = construct_surrogate(mu_s[0], sig_s[0], (phi[0], mu[0], var[0]), p[0], ref)
    np.testing.assert_allclose(one, ref.predict(p[:1], terms[:1], mu_s[:1])[0])


# -- descriptor head -------------------------------------------------------------

def test_descriptor_outputs_bounded_untrained():
    rng = np.random.default_rng(0)
    A, B, C = rng.normal(size=(30, 10)) * 50, rng.normal(size=(30, 5)) * 50, rng.normal(size=(30, 3))
    head = DescriptorHead(epochs=0).fit(A, B, C, rng.uniform(size=(30, 34)))
    xi, kappa = head.predict(A, B, C)
    assert xi.shape == kappa.shape == (30, 17)
    assert np.all((xi >= 0) & (xi <= 1) & (kappa >= 0) & (kappa <= 1))
    with pytest.raises(ValueError):
        DescriptorHead("signal").fit(A, B, C, rng.uniform(size=(30, 34)))
    with pytest.raises(ValueError):
        DescriptorHead("pose+signal").fit(A, None, None, rng.uniform(size=(30, 34)))


def test_descriptor_ablation_ordering_on_informative_features():
    rng = np.random.default_rng(1)
    n = 600
    pose = rng.normal(size=(n, 6))
    sig = rng.normal(size=(n, 4))
    ref = rng.normal(size=(n, 4))
    logits = np.hstack([pose[:, :2] + sig[:, :2] + ref[:, :2], pose[:, 2:4] + sig[:, 2:4] + ref[:, 2:4]])
    Y = 1.0 / (1.0 + np.exp(-logits))
    tr, te = slice(0, 450), slice(450, n)
    losses = []
    for mode in ("pose", "pose+signal", "pose+signal+refine"):
        head = DescriptorHead(mode, hourglass=(32, 8, 32), epochs=60, random_state=0)
        head.fit(pose[tr], sig[tr], ref[tr], Y[tr])
        xi, kappa = head.predict(pose[te], sig[te], ref[te])
        losses.append(np.mean((xi - Y[te, :2]) ** 2) + np.mean((kappa - Y[te, 2:]) ** 2))
    assert losses[0] > losses[1] > losses[2]


def test_frame_features_empty_and_monotone():
    joints = np.zeros((17, 3))
    assert not frame_features(joints, np.zeros((0, 5))).any()
    near = frame_features(joints, np.array([[0.0, 0.0, 1.0, 1.0, 0.0]]))
    far = frame_features(joints, np.array([[0.0, 0.0, 30.0, 1.0, 0.0]]))
    assert np.all(near >= far) and np.all(near > 0)


# -- hyperparameters ---------------------------------------------------------------

def test_hyperparams_validation():
    h = LatentHyperparams()
    assert h.consistency_dim == 1 + 2 * h.signal_dim
    with pytest.raises(ValueError):
        LatentHyperparams(pose_dim=1)
    with pytest.raises(ValueError):
        LatentHyperparams(n_clusters_max=4, pose_dim=8)
    with pytest.raises(ValueError):
        LatentHyperparams(window=0)
    with pytest.raises(ValueError):
        LatentHyperparams(lambda_div=-1.0)
