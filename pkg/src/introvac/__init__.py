"""Variational classifier with introspective adversarial training."""

__version__ = "0.1.0"

from .distributions import (  # noqa: E402
    GaussianLatent,
    kl_to_standard_normal,
    reparameterize,
    sample_prior,
    standard_normal_log_density,
)
from .losses import LossReport, LossWeights  # noqa: E402
from .model import IntroVAC, ModelConfig, attribute_direction, classify  # noqa: E402
from .trainer import TrainConfig, Trainer, apply_lr_schedule, fit  # noqa: E402

__all__ = [
    "GaussianLatent",
    "IntroVAC",
    "LossReport",
    "LossWeights",
    "ModelConfig",
    "TrainConfig",
    "Trainer",
    "apply_lr_schedule",
    "attribute_direction",
    "classify",
    "fit",
    "kl_to_standard_normal",
    "reparameterize",
    "sample_prior",
    "standard_normal_log_density",
]
