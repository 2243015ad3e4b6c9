"""Latent pose/signal learning stack."""

from .descriptor import KERNEL_RADII, MODES, DescriptorHead, frame_features
from .generator import DistributionGenerator, basis_elements, generate_latent_distribution
from .pipeline import DescriptorFeatures, JointsPipeline, LatentHyperparams, estimate_psi_bar
from .pose import (
    BasisError,
    PoseBasis,
    PoseVAE,
    build_pose_basis,
    cluster_poses,
    decompose_pose,
    fine_tune_opl,
    flatten_poses,
    gram_schmidt,
    mean_inter_class_cosine,
    select_basis_clusters,
)
from .signal import (
    SignalEncoder,
    build_empirical_distribution,
    mixture_to_array,
    neighbor_indices,
    select_global_components,
)
from .surrogate import SurrogateRefiner, construct_surrogate, divergence_terms

__all__ = [
    "KERNEL_RADII", "MODES", "DescriptorHead", "frame_features", "DistributionGenerator", "basis_elements",
    "generate_latent_distribution", "DescriptorFeatures", "JointsPipeline", "LatentHyperparams", "estimate_psi_bar", "BasisError",
    "PoseBasis", "PoseVAE", "build_pose_basis", "cluster_poses", "decompose_pose", "fine_tune_opl",
    "flatten_poses", "gram_schmidt", "mean_inter_class_cosine", "select_basis_clusters", "SignalEncoder",
    "build_empirical_distribution", "mixture_to_array", "neighbor_indices", "select_global_components",
    "SurrogateRefiner", "construct_surrogate", "divergence_terms",
]
