"""Training objectives.

Variational-classifier terms (reconstruction, attribute BCE, KL regulariser)
and the four introspective adversarial losses. Every ``-log sigmoid`` is
computed as a softplus in logit space.
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .distributions import GaussianLatent, kl_to_standard_normal
from .errors import InvalidInputError


@dataclass
class LossWeights:
    beta_ae: float = 100.0
    beta_cl: float = 10.0
    beta_reg: float = 3.0
    beta_g: float = 5.0
    beta_ec: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise InvalidInputError(f"{f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class LossReport:
    l_ae: float
    l_cl: float
    l_reg: float
    l_ec_rec: float
    l_ec_gen: float
    l_g_rec: float
    l_g_gen: float
    total_phase1: float
    total_phase2: float

    ADVERSARIAL_FIELDS = ("l_ec_rec", "l_ec_gen", "l_g_rec", "l_g_gen", "total_phase2")

    def to_dict(self, adversarial: bool = True) -> dict[str, float]:
        d = dataclasses.asdict(self)
        if not adversarial:
            for k in self.ADVERSARIAL_FIELDS:
                d.pop(k)
        return d

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in dataclasses.asdict(self).values())


def reconstruction_loss(x: torch.Tensor, x_r: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    """Mean absolute (``"l1"``) or squared (``"mse"``) pixel error over batch and pixels."""
    if x.shape != x_r.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_r.shape)}")
    if kind == "l1":
        return (x - x_r).abs().mean()
    if kind == "mse":
        return (x - x_r).pow(2).mean()
    raise InvalidInputError(f"unknown reconstruction loss {kind!r}")


def _check_labels(y: torch.Tensor) -> torch.Tensor:
    y = torch.as_tensor(y)
    if not torch.all((y == 0) | (y == 1)):
        raise InvalidInputError("labels must be 0 or 1")
    return y


def classification_loss(y: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy summed over attributes, averaged over the batch.

    ``y`` and ``logits`` share shape ``(B, k)`` (or ``(k,)`` for one sample).
    """
    y = _check_labels(y).to(logits.dtype)
    if y.shape != logits.shape:
        raise InvalidInputError(f"label shape {tuple(y.shape)} != logit shape {tuple(logits.shape)}")
    bce = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    if bce.dim() == 1:
        return bce.sum()
    return bce.sum(dim=-1).mean()


def neg_log_sigmoid(logit: torch.Tensor) -> torch.Tensor:
    """``-log sigmoid(l)``, stable for any ``l``."""
    return F.softplus(-logit)


def neg_log_one_minus_sigmoid(logit: torch.Tensor) -> torch.Tensor:
    """``-log(1 - sigmoid(l))``, stable for any ``l``."""
    return F.softplus(logit)


@contextlib.contextmanager
def frozen(params: Iterable[torch.nn.Parameter]):
    """Temporarily stop gradients from reaching ``params``.

    Activations computed inside the block still propagate gradients to their
    inputs; only the listed parameters become constants.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p in params:
            p.requires_grad_(True)


def _measure(model, x: torch.Tensor) -> torch.Tensor:
    """Logits of the encoder's posterior mean for images ``x``."""
    return model.classify(model.encode(x).mean)


def encoder_classifier_fake_loss(x: torch.Tensor, model) -> torch.Tensor:
    """``-log sigmoid(fake(E(dt(x))))``: teaches encoder and classifier to flag ``x`` as fake.

    ``x`` is detached, so no gradient reaches whatever produced it.
    """
    return neg_log_sigmoid(_measure(model, x.detach())[:, model.num_attributes]).mean()


def _measurement_context(model, freeze: bool):
    return frozen(model.encoder_classifier_parameters()) if freeze else contextlib.nullcontext()


def decoder_reconstruction_loss(x_rr: torch.Tensor, y: torch.Tensor, model, freeze_measurement: bool = True):
    """``BCE(y, class(E(x_rr))) - log(1 - sigmoid(fake(E(x_rr))))``.

    With ``freeze_measurement`` the encoder and classifier act as a fixed
    measurement: gradients pass through their activations to ``x_rr`` but not
    into their parameters.
    """
    k = model.num_attributes
    with _measurement_context(model, freeze_measurement):
        logits = _measure(model, x_rr)
        return classification_loss(y, logits[:, :k]) + neg_log_one_minus_sigmoid(logits[:, k]).mean()


def decoder_generated_loss(x_g: torch.Tensor, model, freeze_measurement: bool = True):
    """``-log(1 - sigmoid(fake(E(x_g))))``; no class term since prior samples carry no label."""
    with _measurement_context(model, freeze_measurement):
        return neg_log_one_minus_sigmoid(_measure(model, x_g)[:, model.num_attributes]).mean()


def adversarial_losses_reconstruction(
    x_rr: torch.Tensor, y: torch.Tensor, model, freeze_measurement: bool = True
) -> tuple[torch.Tensor, torch.Tensor]:
    """``(l_ec, l_g)`` for reconstructions ``x_rr = G(dt(z_r))``.

    Both terms are evaluated with the current encoder/classifier parameters.
    The trainer calls the two halves separately because the decoder term must
    see the parameters after the encoder/classifier update.
    """
    return (
        encoder_classifier_fake_loss(x_rr, model),
        decoder_reconstruction_loss(x_rr, y, model, freeze_measurement),
    )


def adversarial_losses_generated(
    x_g: torch.Tensor, model, freeze_measurement: bool = True
) -> tuple[torch.Tensor, torch.Tensor]:
    """``(l_ec, l_g)`` for prior samples ``x_g = G(z_g)``."""
    return (
        encoder_classifier_fake_loss(x_g, model),
        decoder_generated_loss(x_g, model, freeze_measurement),
    )


def phase1_total(l_ae, l_cl, l_reg, l_ec_rec, l_ec_gen, w: LossWeights):
    """Encoder/classifier objective: weighted VAC terms plus ``beta_ec`` adversarial terms."""
    return (
        w.beta_ae * l_ae
        + w.beta_cl * l_cl
        + w.beta_reg * l_reg
        + w.beta_ec * (l_ec_rec + l_ec_gen)
    )


def phase2_total(l_g_rec, l_g_gen, w: LossWeights):
    """Decoder adversarial objective."""
    return w.beta_g * (l_g_rec + l_g_gen)


def vac_objective(x, y, x_r, q: GaussianLatent, logits, w: LossWeights, kind: str = "l1"):
    """Negative single-sample VAC evidence bound, weighted: ``(total, l_ae, l_cl, l_reg)``."""
    l_ae = reconstruction_loss(x, x_r, kind)
    l_cl = classification_loss(y, logits)
    l_reg = kl_to_standard_normal(q)
    return w.beta_ae * l_ae + w.beta_cl * l_cl + w.beta_reg * l_reg, l_ae, l_cl, l_reg


def vac_elbo(
    q: GaussianLatent,
    log_px_given_z: Callable[[torch.Tensor], torch.Tensor],
    log_py_given_z: Callable[[torch.Tensor], torch.Tensor],
    quadrature_points: int = 32,
) -> torch.Tensor:
    """Evidence bound ``E_q[log p(x|z) + log p(y|z)] - KL(q || p(z))`` for one datum.

    The expectation is evaluated with a tensor-product Gauss-Hermite rule, so it
    is exact whenever the log-likelihoods are polynomials of degree below
    ``2 * quadrature_points`` in ``z``. Practical for latent dimension <= 3.

    Args:
        q: Posterior with ``mean``/``log_var`` of shape ``(d,)``.
        log_px_given_z, log_py_given_z: Map ``(n, d)`` latent points to ``(n,)``
            log-likelihood values.
    """
    if q.mean.dim() != 1:
        raise InvalidInputError("vac_elbo evaluates a single posterior of shape (d,)")
    d = q.dim
    nodes, weights = np.polynomial.hermite_e.hermegauss(quadrature_points)
    weights = weights / math.sqrt(2.0 * math.pi)
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    eps = torch.as_tensor(np.stack([g.ravel() for g in grids], axis=1), dtype=q.mean.dtype)
    wgrid = np.meshgrid(*([weights] * d), indexing="ij")
    wts = torch.as_tensor(np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1), dtype=q.mean.dtype)
    z = q.mean + q.std * eps
    expected = torch.sum(wts * (log_px_given_z(z) + log_py_given_z(z)))
    return expected - kl_to_standard_normal(q, reduction="none")
