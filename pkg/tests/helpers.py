"""Shared test utilities: finite differences and a two-pixel toy model."""

from __future__ import annotations

import torch
from torch import nn

from introvac.distributions import GaussianLatent
from introvac.model import ClassifierHead


def fd_check(f, param: torch.Tensor, indices, h: float = 1e-6, rel: float = 1e-3, abs_tol: float = 1e-7):
    """Compare autograd ``d f() / d param`` with central differences at ``indices``.

    Returns the list of ``(autograd, finite difference)`` pairs after asserting.
    """
    param.grad = None
    (grad,) = torch.autograd.grad(f(), param, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(param)
    out = []
    flat = param.data.view(-1)
    for idx in indices:
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
            up = f().item()
            flat[idx] = orig - h
            down = f().item()
            flat[idx] = orig
        fd = (up - down) / (2 * h)
        g = grad.view(-1)[idx].item()
        assert abs(g - fd) <= rel * max(abs(g), abs(fd)) + abs_tol, (idx, g, fd)
        out.append((g, fd))
    return out


class ToyModel(nn.Module):
    """Two-pixel images, one-dimensional latent, one attribute.

    encoder: mean = a . x, log_var = c;  decoder: x = theta * z (two pixels);
    classifier: logits = w * z + b for [attribute, fake].
    """

    def __init__(self, a=(0.7, -0.4), c=-1.0, theta=(0.9, 0.3), w=(1.3, -0.8), b=(0.1, 0.2)):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(a, dtype=torch.float64))
        self.c = nn.Parameter(torch.tensor([c], dtype=torch.float64))
        self.theta = nn.Parameter(torch.tensor(theta, dtype=torch.float64))
        self.head = ClassifierHead(1, 1).double()
        with torch.no_grad():
            self.head.weight.copy_(torch.tensor(w, dtype=torch.float64)[:, None])
            self.head.bias.copy_(torch.tensor(b, dtype=torch.float64))

    num_attributes = 1
    latent_dim = 1

    def encode(self, x):
        flat = x.reshape(x.shape[0], 2)
        mean = (flat * self.a).sum(dim=1, keepdim=True)
        return GaussianLatent(mean, self.c.expand_as(mean))

    def decode(self, z):
        return (z * self.theta).reshape(z.shape[0], 1, 1, 2)

    def classify(self, z):
        return self.head(z)

    def encoder_classifier_parameters(self):
        return [self.a, self.c] + list(self.head.parameters())

    def decoder_parameters(self):
        return [self.theta]


class IdentityModel(nn.Module):
    """Perfect autoencoder: the latent is the flattened image; the head reads pixel 0."""

    def __init__(self, shape=(1, 4, 4), bias=30.0):
        super().__init__()
        self.shape = shape
        d = shape[0] * shape[1] * shape[2]
        self.latent_dim = d
        self.num_attributes = 1
        self.head = ClassifierHead(d, 1)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.copy_(torch.tensor([bias, 0.0]))

    def encode(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        mean = x.reshape(x.shape[0], -1)
        return GaussianLatent(mean, torch.full_like(mean, -30.0))

    def decode(self, z):
        return z.reshape(z.shape[0], *self.shape)

    def classify(self, z):
        return self.head(z)
