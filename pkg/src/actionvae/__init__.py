"""Self-supervised discovery of discrete vehicle actions.

Learns a small set of discrete actions as Gaussian components in a
continuous latent space from trajectory/scenario pairs, predicts
per-scenario action probabilities, and produces scenario-conditioned
trajectory distributions per action.
"""

__version__ = "0.1.0"

from .gaussmath import (
    DiagGaussian,
    LatentPoint,
    cross_entropy,
    entropy,
    kl_diag,
    log_pdf_identity_cov,
    sample_reparam,
    sigma_points,
)
from .model import ActionPosterior, LatentMixture, ModelState, apply_label_override, build_model
from .objectives import ObjectiveReport, elbo_base, loss_dual, loss_unified
from .synthdata import (
    Dataset,
    GenConfig,
    FamilySpec,
    default_fixture_config,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .training import (
    TrainConfig,
    build_from_config,
    init_mixture,
    load_checkpoint,
    pretrain_vae,
    save_checkpoint,
    train_base,
    train_dual,
    train_unified,
)
from .evaluation import (
    Prediction,
    cluster_agreement,
    effective_actions,
    export_plots,
    holdout_elbo,
    min_ade,
    predict,
)

__all__ = [
    "Dataset",
    "GenConfig",
    "FamilySpec",
    "default_fixture_config",
    "generate_dataset",
    "read_dataset",
    "write_dataset",
    "TrainConfig",
    "build_from_config",
    "init_mixture",
    "load_checkpoint",
    "pretrain_vae",
    "save_checkpoint",
    "train_base",
    "train_dual",
    "train_unified",
    "Prediction",
    "cluster_agreement",
    "effective_actions",
    "export_plots",
    "holdout_elbo",
    "min_ade",
    "predict",
    "DiagGaussian",
    "LatentPoint",
    "cross_entropy",
    "entropy",
    "kl_diag",
    "log_pdf_identity_cov",
    "sample_reparam",
    "sigma_points",
    "ActionPosterior",
    "LatentMixture",
    "ModelState",
    "apply_label_override",
    "build_model",
    "ObjectiveReport",
    "elbo_base",
    "loss_dual",
    "loss_unified",
]
