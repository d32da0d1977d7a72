"""Latent-space procedures on a trained model: attribute manipulation along
classifier directions, prior generation and conditional Langevin sampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .distributions import sample_prior
from .errors import DegenerateDirectionError, InvalidInputError
from .evaluation import evaluating
from .model import attribute_direction
from .seeding import derive_seed

log = logging.getLogger(__name__)

# fixed shifts used for single-attribute, multi-attribute-single-edit and both-attribute edits
DEFAULT_DELTA_SINGLE = 3.0
DEFAULT_DELTA_ONE_OF_MANY = 4.0
DEFAULT_DELTA_BOTH = 5.0


@dataclass
class ManipulationResult:
    z: torch.Tensor
    z_aug: torch.Tensor
    x_rec: torch.Tensor
    x_aug: torch.Tensor
    deltas: torch.Tensor  # (B, n_requested) signed shifts actually applied
    logits_before: torch.Tensor
    logits_after: torch.Tensor


def _directions(head, indices: Sequence[int]) -> torch.Tensor:
    if head.weight.detach().abs().sum() == 0:
        raise DegenerateDirectionError("classifier head is all zeros (untrained?)")
    return torch.stack([attribute_direction(head, i) for i in indices])


def shift_latent(z: torch.Tensor, directions: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """``z + sum_j deltas[:, j] * directions[j]`` for ``z`` of shape ``(B, d)``."""
    return z + deltas.to(z.dtype) @ directions.to(z.dtype)


def manipulate(
    model,
    images: torch.Tensor,
    attribute_deltas: Sequence[tuple[int, float]],
) -> ManipulationResult:
    """Move the posterior mean of each image along unit attribute directions.

    ``attribute_deltas`` holds ``(attribute_index, signed delta)`` pairs; a
    positive delta adds the attribute, a negative one removes it. Several
    pairs compose additively.
    """
    if images.dim() == 3:
        images = images.unsqueeze(0)
    indices = [int(i) for i, _ in attribute_deltas]
    for i, d in attribute_deltas:
        if not math.isfinite(float(d)):
            raise InvalidInputError(f"delta for attribute {i} is not finite")
    dirs = _directions(model.head, indices)
    deltas = torch.tensor([[float(d) for _, d in attribute_deltas]] * images.shape[0])
    with evaluating(model):
        z = model.encode(images).mean
        z_aug = shift_latent(z, dirs, deltas)
        return ManipulationResult(
            z=z,
            z_aug=z_aug,
            x_rec=model.decode(z),
            x_aug=model.decode(z_aug),
            deltas=deltas,
            logits_before=model.classify(z),
            logits_after=model.classify(z_aug),
        )


def manipulate_auto(
    model,
    images: torch.Tensor,
    targets: Sequence[tuple[int, int]],
    threshold: float = 0.9,
    start: float = 0.5,
    growth: float = 1.5,
    max_iter: int = 20,
    criterion: str = "image",
) -> ManipulationResult:
    """Grow the shift until the edited image is confidently classified.

    ``targets`` holds ``(attribute_index, desired label)`` pairs. Every image
    gets one scalar ``delta`` (applied with sign +1 for label 1, -1 for
    label 0 along each requested direction) starting at ``start`` and
    multiplied by ``growth`` until all targets reach probability
    ``threshold``, for at most ``max_iter`` rounds. With ``criterion="image"``
    confidence is measured on the re-encoded decoded image, with
    ``"latent"`` on the shifted latent itself.
    """
    if criterion not in ("image", "latent"):
        raise InvalidInputError("criterion must be 'image' or 'latent'")
    if images.dim() == 3:
        images = images.unsqueeze(0)
    indices = [int(i) for i, _ in targets]
    signs = torch.tensor([1.0 if int(t) == 1 else -1.0 for _, t in targets])
    target = torch.tensor([float(t) for _, t in targets])
    dirs = _directions(model.head, indices)
    b = images.shape[0]
    with evaluating(model):
        z = model.encode(images).mean
        delta = torch.full((b,), float(start))
        done = torch.zeros(b, dtype=torch.bool)
        for it in range(max_iter):
            z_aug = shift_latent(z, dirs, delta[:, None] * signs[None, :])
            if criterion == "image":
                logits = model.classify(model.encode(model.decode(z_aug)).mean)
            else:
                logits = model.classify(z_aug)
            p = torch.sigmoid(logits[:, indices])
            conf = torch.where(target == 1, p, 1 - p)
            done = done | (conf >= threshold).all(dim=1)
            if bool(done.all()) or it == max_iter - 1:
                break
            delta = torch.where(done, delta, delta * growth)
        deltas = delta[:, None] * signs[None, :]
        z_aug = shift_latent(z, dirs, deltas)
        return ManipulationResult(
            z=z,
            z_aug=z_aug,
            x_rec=model.decode(z),
            x_aug=model.decode(z_aug),
            deltas=deltas,
            logits_before=model.classify(z),
            logits_after=model.classify(z_aug),
        )


def generate_from_prior(model, count: int, seed: int) -> torch.Tensor:
    """Decode ``count`` prior draws; identical output for identical ``seed``."""
    z = sample_prior(model.latent_dim, count, seed=seed)
    params = list(model.parameters())
    if params:
        z = z.to(params[0].dtype)
    with evaluating(model):
        return model.decode(z)


# ----------------------------------------------------------------------------
# Langevin Monte Carlo


@dataclass
class LangevinConfig:
    target_labels: list[int]
    step_size: float = 2e-4
    steps: int = 5000
    num_chains: int = 64
    reject_misclassified: bool = True
    seed: int = 0

    def __post_init__(self):
        self.target_labels = [int(t) for t in self.target_labels]
        if any(t not in (0, 1) for t in self.target_labels):
            raise InvalidInputError("target labels must be 0 or 1")
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be positive")
        if self.steps < 1 or self.num_chains < 1:
            raise InvalidInputError("steps and num_chains must be >= 1")


def langevin_step(z: torch.Tensor, grad_u: torch.Tensor, step_size: float, noise: torch.Tensor) -> torch.Tensor:
    """``z - step_size * grad_u + sqrt(2 * step_size) * noise``."""
    return z - step_size * grad_u + math.sqrt(2.0 * step_size) * noise


def conditional_energy_grad(weight: torch.Tensor, bias: torch.Tensor, target: torch.Tensor):
    """Gradient of ``U(z) = -log p(y|z) - log p(z)`` for a logistic head and N(0, I) prior.

    ``weight``/``bias`` are the attribute rows only; returns a function
    ``z -> z - sum_j (y_j - sigmoid(w_j . z + b_j)) w_j``.
    """

    def grad(z):
        resid = target - torch.sigmoid(z @ weight.T + bias)
        return z - resid @ weight

    return grad


def conditional_energy(weight: torch.Tensor, bias: torch.Tensor, target: torch.Tensor):
    """``U(z)`` itself, dropping the constant of the prior log-density."""

    def energy(z):
        logits = z @ weight.T + bias
        nll = F.binary_cross_entropy_with_logits(logits, target.expand_as(logits), reduction="none").sum(-1)
        return nll + 0.5 * z.pow(2).sum(-1)

    return energy


def _chain_generator(seed: int, chain: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, "langevin", chain))


def run_chains(
    grad_energy: Callable[[torch.Tensor], torch.Tensor],
    dim: int,
    num_chains: int,
    step_size: float,
    steps: int,
    seed: int,
    init: Callable[[torch.Generator, int], torch.Tensor] | None = None,
    dtype: torch.dtype = torch.float64,
    max_block_floats: int = 8_000_000,
) -> torch.Tensor:
    """Run independent unadjusted Langevin chains and return their final states.

    Chain ``i`` draws its start point and all of its noise from its own
    stream derived from ``(seed, i)``, so a chain's trajectory does not depend
    on ``num_chains`` or on how chains are blocked for vectorization. The
    default start point is a draw from ``N(0, I)``.
    """
    per_chain = steps * dim
    block = max(1, min(num_chains, max_block_floats // max(per_chain, 1)))
    finals = []
    for start in range(0, num_chains, block):
        ids = range(start, min(start + block, num_chains))
        z0, noise = [], []
        for i in ids:
            g = _chain_generator(seed, i)
            z0.append(init(g, dim) if init is not None else torch.randn(dim, generator=g, dtype=dtype))
            noise.append(torch.randn(steps, dim, generator=g, dtype=dtype))
        z = torch.stack(z0).to(dtype)
        eps = torch.stack(noise, dim=1)  # (steps, chains, dim)
        with torch.no_grad():
            for k in range(steps):
                z = langevin_step(z, grad_energy(z), step_size, eps[k])
        finals.append(z)
    return torch.cat(finals)


@dataclass
class LangevinResult:
    latents: torch.Tensor
    images: torch.Tensor
    num_chains: int
    num_discarded: int
    num_rejected: int
    chain_indices: list[int] = field(default_factory=list)

    @property
    def num_accepted(self) -> int:
        return self.latents.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.num_accepted / self.num_chains

    @property
    def empty(self) -> bool:
        return self.num_accepted == 0


def classify_matches(head, z: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """Mask of latents whose attribute probabilities fall on the target side of 0.5."""
    k = len(target)
    with torch.no_grad():
        p = torch.sigmoid(head(z.to(head.weight.dtype))[:, :k])
    t = torch.tensor(target, dtype=torch.bool)
    return torch.where(t, p > 0.5, p < 0.5).all(dim=1)


def langevin_sample(config: LangevinConfig, model) -> LangevinResult:
    """Sample latents from ``p(z | y) ∝ p(y | z) p(z)`` and decode them.

    Chains start from the prior and run for exactly ``config.steps``
    iterations. Non-finite final states are discarded (and counted). With
    ``reject_misclassified`` the latent classifier must assign every target
    label; an empty result is signalled by ``result.empty`` rather than an
    exception.
    """
    head = model.head
    k = head.num_attributes
    if len(config.target_labels) != k:
        raise InvalidInputError(f"need {k} target labels, got {len(config.target_labels)}")
    weight = head.weight.detach().double()[:k]
    bias = head.bias.detach().double()[:k]
    target = torch.tensor(config.target_labels, dtype=torch.float64)
    grad = conditional_energy_grad(weight, bias, target)
    z = run_chains(grad, head.in_features, config.num_chains, config.step_size, config.steps, config.seed)
    finite = torch.isfinite(z).all(dim=1)
    discarded = int((~finite).sum())
    if discarded:
        log.warning("discarded %d non-finite Langevin chains", discarded)
    keep = finite.clone()
    rejected = 0
    if config.reject_misclassified:
        ok = torch.zeros_like(finite)
        ok[finite] = classify_matches(head, z[finite], config.target_labels)
        rejected = int((finite & ~ok).sum())
        keep = ok
    idx = torch.nonzero(keep).flatten()
    latents = z[idx].to(head.weight.dtype)
    if latents.shape[0] > 0:
        with evaluating(model):
            images = model.decode(latents)
    else:
        c = model.config
        images = torch.empty(0, c.image_channels, c.image_size, c.image_size)
    return LangevinResult(latents, images, config.num_chains, discarded, rejected, idx.tolist())
