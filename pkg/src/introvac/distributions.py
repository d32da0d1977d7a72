"""Diagonal-Gaussian helpers: KL to the standard normal, reparameterized
sampling, prior draws and the prior log-density.

All functions work on batched tensors of shape ``(..., d)``; the trailing axis
is the latent dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import InvalidInputError

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 30.0


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise InvalidInputError(f"{name} contains non-finite values")


@dataclass
class GaussianLatent:
    """Posterior parameters ``q(z|x) = N(mean, diag(exp(log_var)))``.

    ``log_var`` is clamped to ``[LOG_VAR_MIN, LOG_VAR_MAX]`` on construction.
    """

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean)
        self.log_var = torch.as_tensor(self.log_var, dtype=self.mean.dtype)
        if self.mean.shape != self.log_var.shape:
            raise InvalidInputError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape {tuple(self.log_var.shape)}"
            )
        if self.mean.dim() == 0 or self.mean.shape[-1] == 0:
            raise InvalidInputError("latent dimension must be positive")
        self.log_var = self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)

    def __getitem__(self, idx) -> "GaussianLatent":
        return GaussianLatent(self.mean[idx], self.log_var[idx])

    def detach(self) -> "GaussianLatent":
        return GaussianLatent(self.mean.detach(), self.log_var.detach())


def kl_to_standard_normal(q: GaussianLatent, reduction: str = "mean") -> torch.Tensor:
    """KL(q || N(0, I)) in closed form.

    The per-sample divergence is ``0.5 * sum(mean^2 + var - log_var - 1)`` over
    the latent axis.

    Args:
        q: Posterior parameters, shape ``(..., d)``.
        reduction: ``"mean"`` averages over all leading (batch) axes,
            ``"none"`` returns the per-sample values.
    """
    _check_finite("mean", q.mean)
    _check_finite("log_var", q.log_var)
    kl = 0.5 * torch.sum(q.mean.pow(2) + q.log_var.exp() - q.log_var - 1.0, dim=-1)
    # guards the tiny negative rounding possible when q is exactly the prior
    kl = kl.clamp_min(0.0)
    if reduction == "none":
        return kl
    if reduction == "mean":
        return kl.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def reparameterize(q: GaussianLatent, noise: torch.Tensor) -> torch.Tensor:
    """Return ``mean + exp(0.5 * log_var) * noise``, differentiable in both."""
    noise = torch.as_tensor(noise, dtype=q.mean.dtype)
    if noise.shape[-1] != q.dim:
        raise InvalidInputError(f"noise dimension {noise.shape[-1]} != latent dimension {q.dim}")
    return q.mean + q.std * noise


def sample_prior(
    d: int,
    count: int,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Draw ``count`` i.i.d. vectors from ``N(0, I_d)``.

    Exactly one of ``seed`` or ``generator`` should be given; a seed creates a
    fresh generator so repeated calls with the same seed return the same draws.
    """
    if d < 1 or count < 1:
        raise InvalidInputError("d and count must be >= 1")
    if generator is None:
        if seed is None:
            raise InvalidInputError("sample_prior needs a seed or a generator")
        generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(count, d, generator=generator, dtype=dtype)


def standard_normal_log_density(z: torch.Tensor) -> torch.Tensor:
    """``log N(z; 0, I) = -0.5 * ||z||^2 - (d / 2) * log(2 pi)`` over the last axis."""
    z = torch.as_tensor(z)
    _check_finite("z", z)
    d = z.shape[-1]
    return -0.5 * z.pow(2).sum(dim=-1) - 0.5 * d * math.log(2.0 * math.pi)


def gaussian_log_density(z: torch.Tensor, q: GaussianLatent) -> torch.Tensor:
    """Log-density of the diagonal Gaussian ``q`` at ``z``, summed over the last axis."""
    var = q.log_var.exp()
    return -0.5 * torch.sum(
        (z - q.mean).pow(2) / var + q.log_var + math.log(2.0 * math.pi), dim=-1
    )
