"""End-to-end latent pipeline: pose space, signal space, generator, surrogate and descriptor heads."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logit

from ..core import (
    DatasetStats,
    EnrichedPose,
    N_JOINTS,
    descriptor_targets,
    reliability_score,
    sensing_score,
    signal_strengths,
)
from ..stats import FitConfig
from .descriptor import DescriptorHead, frame_features
from .generator import DistributionGenerator
from .pose import PoseVAE, build_pose_basis, cluster_poses, fine_tune_opl, mean_inter_class_cosine, \
    select_basis_clusters
from .signal import SignalEncoder, build_empirical_distribution, mixture_to_array, select_global_components
from .surrogate import SurrogateRefiner, divergence_terms


@dataclass(frozen=True)
class LatentHyperparams:
    """Sizes, loss weights and training schedules of the latent stack (desk defaults)."""

    pose_dim: int = 8
    signal_dim: int = 16
    window: int = 5
    n_clusters_max: int = 24
    n_clusters: int | None = None
    M_max: int = 16
    G: int | None = None
    G_max: int = 4
    n_draws: int = 64
    lambda_step2: float = 1e-2
    lambda_step3: float = 0.5
    lambda_0: float = 1.0
    lambda_1: float = 1.0
    lambda_2: float = 1e-2
    lambda_div: float = 1e-2
    lambda_inter: float = 0.1
    torso_bar: float = 20.0
    vae_epochs: int = 60
    opl_epochs: int = 300
    opl_lr: float = 3e-3
    opl_lambda_rec: float = 2.0
    opl_stop_cosine: float = 0.04
    signal_epochs: int = 40
    generator_epochs: int = 30
    generator_poses: int = 600
    surrogate_epochs: int = 60
    descriptor_epochs: int = 60
    em_max_iterations: int = 200
    em_tol: float = 1e-6
    em_var_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.pose_dim < 2:
            raise ValueError("pose_dim must be >= 2")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.n_clusters_max < self.pose_dim:
            raise ValueError("cluster search must allow at least pose_dim clusters")
        if self.n_clusters is not None and self.n_clusters < self.pose_dim:
            raise ValueError("n_clusters must be >= pose_dim")
        for name, value in asdict(self).items():
            if name.startswith("lambda_") and value < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def consistency_dim(self):
        return 1 + 2 * self.signal_dim

    @property
    def fit_config(self) -> FitConfig:
        return FitConfig(self.em_max_iterations, self.em_tol, self.em_var_floor, self.seed, self.G_max)


@dataclass
class DescriptorFeatures:
    """Feature blocks of the descriptor head plus the closed-form plug-in scores.

    ``xi_plug`` is the sensing score at the estimated joints; ``kappa_plug`` the
    reliability score of the estimate-to-refined-pose gap. Both are ``(B, J)``.
    """

    pose: np.ndarray
    signal: np.ndarray
    refine: np.ndarray
    xi_plug: np.ndarray
    kappa_plug: np.ndarray

    def blocks(self):
        return self.pose, self.signal, self.refine

    def prior(self, mode, eps=1e-4):
        """Logit offsets available to ``mode``: the sensing score once the signal is seen.

        The gap-based reliability score stays a plain input feature; as an offset it
        pulls every estimate towards 1 whenever the refiner makes small corrections.
        """
        xi = np.zeros_like(self.xi_plug)
        if mode != "pose":
            xi = logit(np.clip(self.xi_plug, eps, 1 - eps))
        return np.hstack([xi, np.zeros_like(self.kappa_plug)])


def estimate_psi_bar(poses, frames, d_min=5.0, d_ref=10.0) -> float:
    """Average per-joint signal strength at ground-truth joints over a training set."""
    probe = DatasetStats(0.0, 20.0, d_min, d_ref)
    return float(np.mean([signal_strengths(p, f, probe).mean() for p, f in zip(poses, frames)]))


class JointsPipeline:
    """Stateful orchestrator of every learned stage.

    Stages run in order: :meth:`fit_pose`, :meth:`fit_signal`,
    :meth:`fit_generator`, then per estimator :meth:`fit_refiner` and
    :meth:`fit_descriptor`. Refiners and heads are keyed by an estimator name.
    """

    def __init__(self, hyper: LatentHyperparams = LatentHyperparams()):
        self.hyper = hyper
        self.refiners = {}
        self.heads = {}

    # -- stage 1: pose space -------------------------------------------------
    def fit_pose(self, poses, frames):
        h = self.hyper
        poses = np.asarray(poses, dtype=float)
        self.stats_ = DatasetStats(estimate_psi_bar(poses, frames), h.torso_bar)
        cfg = h.fit_config
        vae = PoseVAE(h.pose_dim, epochs=h.vae_epochs, lambda_kl=h.lambda_step2, random_state=h.seed).fit(poses)
        Z = vae._standardize(poses)
        model, labels = cluster_poses(Z, h.pose_dim, h.n_clusters_max, cfg, h.n_clusters)
        sizes = np.bincount(labels, minlength=model.n_components)
        selected = select_basis_clusters(model.means_, sizes, Z.mean(axis=0), h.pose_dim)
        in_basis = np.isin(labels, selected)
        self.cosine_before_ = mean_inter_class_cosine(vae.transform(poses[in_basis]), labels[in_basis])
        vae = fine_tune_opl(vae, poses[in_basis], labels[in_basis], h.lambda_step3, epochs=h.opl_epochs, lr=h.opl_lr,
                            seed=h.seed, anchor_poses=poses, lambda_rec=h.opl_lambda_rec,
                            stop_cosine=h.opl_stop_cosine)
        self.cosine_after_ = mean_inter_class_cosine(vae.transform(poses[in_basis]), labels[in_basis])
        self.vae_ = vae
        self.cluster_model_ = model
        self.labels_ = labels
        self.selected_ = selected
        self.mu_p_, self.sigma_p_ = vae.encode(poses)
        return self

    # -- stage 2: signal space -----------------------------------------------
    def fit_signal(self, windows):
        h = self.hyper
        self.signal_ = SignalEncoder(h.signal_dim, h.window, epochs=h.signal_epochs, lambda_triplet=h.lambda_0,
                                     lambda_ce=h.lambda_1, lambda_kl=h.lambda_2, random_state=h.seed)
        self.signal_.fit(windows, self.labels_)
        self.mu_s_, self.sigma_s_ = self.signal_.encode(windows)
        return self

    # -- stage 3: basis distributions and generator --------------------------
    def fit_generator(self):
        h = self.hyper
        cfg = h.fit_config
        corpus = (self.mu_p_, self.mu_s_, self.sigma_s_)
        G = h.G or select_global_components(self.mu_p_, self.sigma_p_, *corpus[1:], G_max=h.G_max, M_max=h.M_max,
                                            n_draws=h.n_draws, config=cfg)
        self.G_ = int(G)
        dists, columns = [], []
        for c in self.selected_:
            members = self.labels_ == c
            centre, spread = self.mu_p_[members].mean(axis=0), self.sigma_p_[members].mean(axis=0)
            own = (self.mu_s_[members].mean(axis=0), self.sigma_s_[members].mean(axis=0))
            dists.append(build_empirical_distribution(centre, spread, *corpus, h.M_max, h.n_draws, self.G_,
                                                      config=cfg, own=own))
            columns.append(centre)
        self.basis_ = build_pose_basis(np.array(columns).T, dists, self.selected_, h.signal_dim)
        rng = np.random.default_rng(h.seed)
        n = len(self.mu_p_)
        sub = np.sort(rng.choice(n, size=min(h.generator_poses, n), replace=False))
        targets = np.array([
            mixture_to_array(build_empirical_distribution(
                self.mu_p_[i], self.sigma_p_[i], *corpus, h.M_max, h.n_draws, self.G_, config=cfg,
                own=(self.mu_s_[i], self.sigma_s_[i])))
            for i in sub])
        self.generator_ = DistributionGenerator(self.G_, h.signal_dim, epochs=h.generator_epochs,
                                                lambda_div=h.lambda_div, random_state=h.seed)
        self.generator_.fit(self.mu_p_[sub], targets, self.mu_s_[sub], self.sigma_s_[sub], self.basis_)
        return self

    # -- inference helpers ----------------------------------------------------
    def encode_windows(self, windows):
        return self.signal_.encode(windows)

    def surrogate_inputs(self, preds, windows=None, encoded=None):
        """``(p_pred latent, divergence terms, mu_S, sigma_S)`` for a batch of predictions."""
        mu_s, sigma_s = encoded if encoded is not None else self.encode_windows(windows)
        p_pred = self.vae_.transform(np.asarray(preds, dtype=float))
        phi, mu, var = self.generator_.generate(p_pred)
        return p_pred, divergence_terms(mu_s, sigma_s, phi, mu, var), mu_s, sigma_s

    def fit_refiner(self, key, preds, poses, windows=None, encoded=None, use_divergence=True, use_signal=True,
                    random_state=None):
        h = self.hyper
        p_pred, terms, mu_s, _ = self.surrogate_inputs(preds, windows, encoded)
        target = self.vae_.transform(np.asarray(poses, dtype=float))
        seed = h.seed if random_state is None else random_state
        refiner = SurrogateRefiner(use_divergence, use_signal, epochs=h.surrogate_epochs, lambda_inter=h.lambda_inter,
                                   random_state=seed).fit(p_pred, terms, mu_s, target)
        self.refiners[key] = refiner
        return refiner

    def refine(self, key, preds, windows=None, encoded=None):
        p_pred, terms, mu_s, _ = self.surrogate_inputs(preds, windows, encoded)
        return self.refiners[key].predict(p_pred, terms, mu_s)

    def refined_poses(self, preds, p_pred, p_refine):
        """Apply the latent correction as a decoded difference so decoder bias cancels."""
        return np.asarray(preds, dtype=float) + self.vae_.decode(p_refine) - self.vae_.decode(p_pred)

    def descriptor_features(self, key, preds, windows, encoded=None) -> DescriptorFeatures:
        """Pose, signal and refined-pose feature blocks for every window."""
        preds = np.asarray(preds, dtype=float)
        if preds.ndim != 3 or preds.shape[1:] != (N_JOINTS, 3):
            raise ValueError(f"expected predictions of shape (B, {N_JOINTS}, 3), got {preds.shape}")
        p_pred, terms, mu_s, sigma_s = self.surrogate_inputs(preds, windows, encoded)
        p_refine = self.refiners[key].predict(p_pred, terms, mu_s)
        refined = self.refined_poses(preds, p_pred, p_refine)
        frames = [w[-1] for w in windows]
        k_pred = np.array([frame_features(p, f).ravel() for p, f in zip(preds, frames)])
        k_ref = np.array([frame_features(r, f).ravel() for r, f in zip(refined, frames)])
        gap = np.linalg.norm(preds - refined, axis=2)
        xi_plug = np.array([sensing_score(signal_strengths(p, f, self.stats_), self.stats_)
                            for p, f in zip(preds, frames)])
        kappa_plug = reliability_score(gap, self.stats_)
        return DescriptorFeatures(
            pose=np.hstack([p_pred, preds.reshape(len(preds), -1)]),
            signal=np.hstack([k_pred, xi_plug, mu_s, sigma_s]),
            refine=np.hstack([p_refine, k_ref, gap, kappa_plug]),
            xi_plug=xi_plug,
            kappa_plug=kappa_plug,
        )

    def descriptor_targets(self, preds, poses, windows):
        out = [descriptor_targets(p, g, w[-1], self.stats_)[:2] for p, g, w in zip(preds, poses, windows)]
        return np.hstack([np.array([o[0] for o in out]), np.array([o[1] for o in out])])

    def fit_descriptor(self, key, preds, poses, windows, encoded=None, mode="pose+signal+refine", features=None,
                       random_state=None):
        h = self.hyper
        feats = features if features is not None else self.descriptor_features(key, preds, windows, encoded)
        seed = h.seed if random_state is None else random_state
        head = DescriptorHead(mode, epochs=h.descriptor_epochs, random_state=seed)
        head.fit(*feats.blocks(), self.descriptor_targets(preds, poses, windows), prior=feats.prior(mode))
        self.heads[key] = head
        return head

    def describe(self, key, preds, windows, encoded=None, features=None):
        """Estimated ``(xi, kappa)`` arrays, each ``(B, J)``."""
        head = self.heads[key]
        feats = features if features is not None else self.descriptor_features(key, preds, windows, encoded)
        return head.predict(*feats.blocks(), prior=feats.prior(head.mode))

    def describe_frame(self, key, pred, window, frame_id=0) -> EnrichedPose:
        """Single-window inference returning the enriched pose and its wall time in ``meta``."""
        start = time.perf_counter()
        xi, kappa = self.describe(key, np.asarray(pred, dtype=float)[None], [window])
        elapsed = time.perf_counter() - start
        return EnrichedPose.from_parts(pred, xi[0], kappa[0], frame_id, wall_time_s=elapsed)
