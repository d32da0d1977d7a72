"""Evaluation: Frechet distance between feature Gaussians, classifier accuracy
and reconstruction error.

The Frechet distance follows the FID recipe with a pluggable embedder in
place of an Inception network. Two embedders ship with the package:
``pixels`` (average-pooled raw pixels) and ``classifier-features`` (the
model's own posterior mean).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InsufficientDataError, InvalidInputError, NumericalError


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class Embedder:
    name: str
    fn: Callable[[torch.Tensor], torch.Tensor]

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            feats = self.fn(images)
        return feats.detach().cpu().double().reshape(feats.shape[0], -1).numpy()


def pixel_embedder(pooled_size: int = 8) -> Embedder:
    """Average-pool images to ``pooled_size`` x ``pooled_size`` and flatten."""

    def fn(images):
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return F.adaptive_avg_pool2d(images.float(), pooled_size).flatten(1)

    return Embedder(f"pixels{pooled_size}", fn)


def classifier_features_embedder(model) -> Embedder:
    """Posterior mean of ``model``'s encoder (eval mode)."""

    def fn(images):
        with evaluating(model):
            return model.encode(images).mean

    return Embedder("classifier-features", fn)


def get_embedder(name: str, model=None) -> Embedder:
    if name.startswith("pixels"):
        size = int(name[len("pixels"):] or 8)
        return pixel_embedder(size)
    if name == "classifier-features":
        if model is None:
            raise InvalidInputError("classifier-features embedder needs a model")
        return classifier_features_embedder(model)
    raise InvalidInputError(f"unknown embedder {name!r}")


@contextlib.contextmanager
def evaluating(model):
    """Put ``model`` in eval mode for the block and restore its previous mode."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        if was_training:
            model.train()


class StatsAccumulator:
    """Streaming mean and scatter matrix (Chan et al. pairwise update, float64)."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def update(self, feats: np.ndarray) -> None:
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        n_b = feats.shape[0]
        if n_b == 0:
            return
        mean_b = feats.mean(axis=0)
        centered = feats - mean_b
        m2_b = centered.T @ centered
        if self.count == 0:
            self.count, self.mean, self.m2 = n_b, mean_b, m2_b
            return
        if feats.shape[1] != self.mean.shape[0]:
            raise InvalidInputError("feature dimension changed mid-stream")
        n_a, n = self.count, self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + np.outer(delta, delta) * (n_a * n_b / n)
        self.count = n

    def finalize(self) -> FeatureStats:
        if self.count < 2:
            raise InsufficientDataError(f"need at least 2 items for covariance, got {self.count}")
        cov = self.m2 / (self.count - 1)
        cov = 0.5 * (cov + cov.T)
        return FeatureStats(self.mean.copy(), cov, self.count)


def accumulate_stats(images: Iterable[torch.Tensor], embedder: Embedder | Callable | None = None) -> FeatureStats:
    """Mean and unbiased covariance of embedded images in one pass.

    ``images`` yields single images ``(C, H, W)`` or batches ``(B, C, H, W)``;
    with ``embedder=None`` the items are taken to be feature vectors already.
    """
    acc = StatsAccumulator()
    for item in images:
        if embedder is None:
            feats = np.atleast_2d(np.asarray(item, dtype=np.float64))
        else:
            if item.dim() == 3:
                item = item.unsqueeze(0)
            feats = embedder(item)
        acc.update(feats)
    return acc.finalize()


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray, rel_tol: float = 1e-10) -> float:
    """``Tr((cov_a cov_b)^{1/2})`` via the symmetric form ``cov_a^{1/2} cov_b cov_a^{1/2}``."""
    root_a = _psd_sqrt(cov_a)
    m = root_a @ cov_b @ root_a
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    scale = max(float(np.max(np.abs(eig))), 1e-300) if eig.size else 1.0
    tol = rel_tol * scale
    bad = eig < -max(tol, 1e-6 * max(scale, 1.0))
    if np.any(bad):
        raise NumericalError(
            f"matrix square root failed: eigenvalues down to {eig.min():.3e} (scale {scale:.3e})"
        )
    eig = np.where(eig < tol, 0.0, eig)
    return float(np.sum(np.sqrt(eig)))


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Squared Frechet distance ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``."""
    if a.dim != b.dim:
        raise InvalidInputError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    tr = np.trace(a.covariance) + np.trace(b.covariance)
    # the symmetric form is asymmetric in rounding; average both orders
    tr_sqrt = 0.5 * (trace_sqrt_product(a.covariance, b.covariance)
                     + trace_sqrt_product(b.covariance, a.covariance))
    return max(float(diff @ diff + tr - 2.0 * tr_sqrt), 0.0)


def _batches(dataset, batch_size: int):
    for start in range(0, len(dataset), batch_size):
        yield dataset.images[start : start + batch_size], dataset.labels[start : start + batch_size]


def classifier_accuracy(dataset, model, batch_size: int = 256) -> np.ndarray:
    """Per-attribute accuracy of ``sigmoid(logit(posterior mean)) >= 0.5`` against the labels."""
    if len(dataset) == 0:
        raise InsufficientDataError("empty dataset")
    k = model.num_attributes
    correct = np.zeros(k)
    with evaluating(model):
        for x, y in _batches(dataset, batch_size):
            logits = model.classify(model.encode(x).mean)[:, :k]
            pred = (logits >= 0).to(y.dtype)
            correct += (pred == y).double().sum(dim=0).numpy()
    return correct / len(dataset)


def reconstruct(model, images: torch.Tensor) -> torch.Tensor:
    """Decode the posterior mean of ``images`` (no sampling)."""
    with evaluating(model):
        return model.decode(model.encode(images).mean)


def reconstruction_error(dataset, model, batch_size: int = 256) -> float:
    """Mean absolute pixel error of posterior-mean reconstructions."""
    if len(dataset) == 0:
        raise InsufficientDataError("empty dataset")
    total, n = 0.0, 0
    for x, _ in _batches(dataset, batch_size):
        total += float((reconstruct(model, x) - x).abs().sum())
        n += x.numel()
    return total / n


def evaluate_reconstruction_fid(model, dataset, embedder: Embedder, batch_size: int = 256) -> dict:
    """Frechet distance between real and reconstructed images plus L1 error and accuracy."""
    real, recon = StatsAccumulator(), StatsAccumulator()
    l1, n = 0.0, 0
    for x, _ in _batches(dataset, batch_size):
        x_r = reconstruct(model, x)
        if x_r.shape != x.shape:
            raise InvalidInputError("reconstruction shape differs from dataset images")
        real.update(embedder(x))
        recon.update(embedder(x_r))
        l1 += float((x_r - x).abs().sum())
        n += x.numel()
    fid = frechet_distance(real.finalize(), recon.finalize())
    acc = classifier_accuracy(dataset, model, batch_size)
    return {
        "fid_reconstruction": fid,
        "l1_error": l1 / n,
        "accuracy_per_attribute": [float(a) for a in acc],
        "num_images": len(dataset),
        "embedder": embedder.name,
    }
