"""Residual encoder, mirrored residual decoder and the linear latent classifier.

The encoder maps an image to the parameters of a diagonal Gaussian posterior,
the decoder maps a latent code back to an image in ``[0, 1]``, and the
classifier head is a single linear layer with ``k`` attribute logits followed
by one fake/real logit.
"""

from __future__ import annotations

import dataclasses
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .distributions import GaussianLatent
from .errors import DegenerateDirectionError, InvalidInputError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 32
    image_channels: int = 3
    latent_dim: int = 32
    channel_plan: list[int] = field(default_factory=lambda: [32, 64, 128])
    num_attributes: int = 2
    norm: str = "batch"
    attribute_names: list[str] | None = None

    def __post_init__(self):
        self.channel_plan = [int(c) for c in self.channel_plan]
        for name in ("image_size", "image_channels", "latent_dim", "num_attributes"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be a positive integer")
        if not self.channel_plan or any(c < 1 for c in self.channel_plan):
            raise InvalidInputError("channel_plan must be a non-empty list of positive integers")
        if self.image_size % (2 ** len(self.channel_plan)) != 0:
            raise InvalidInputError(
                f"image_size {self.image_size} is not divisible by 2^{len(self.channel_plan)}"
            )
        if self.norm not in ("batch", "none"):
            raise InvalidInputError(f"norm must be 'batch' or 'none', got {self.norm!r}")
        if self.attribute_names is None:
            self.attribute_names = [f"attr{i}" for i in range(self.num_attributes)]
        if len(self.attribute_names) != self.num_attributes:
            raise InvalidInputError("attribute_names length must equal num_attributes")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // (2 ** len(self.channel_plan))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def _norm(channels: int, kind: str) -> nn.Module:
    return nn.BatchNorm2d(channels) if kind == "batch" else nn.Identity()


class ResidualBlock(nn.Module):
    """Pre-activation block: (norm, lrelu, conv3x3) twice plus a skip path.

    The skip is the identity when channel counts match, otherwise a 1x1 conv.
    """

    def __init__(self, in_channels: int, out_channels: int, norm: str = "batch"):
        super().__init__()
        self.norm1 = _norm(in_channels, norm)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm2 = _norm(out_channels, norm)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Identity()
            if in_channels == out_channels
            else nn.Conv2d(in_channels, out_channels, 1, bias=False)
        )

    def forward(self, x):
        h = self.conv1(F.leaky_relu(self.norm1(x), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        plan = config.channel_plan
        self.stem = nn.Conv2d(config.image_channels, plan[0], 3, padding=1)
        stages = []
        prev = plan[0]
        for c in plan:
            stages += [ResidualBlock(prev, c, config.norm), nn.AvgPool2d(2)]
            prev = c
        self.stages = nn.Sequential(*stages)
        s = config.bottleneck_size
        self.fc = nn.Linear(prev * s * s, 2 * config.latent_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.stages(self.stem(x))
        h = F.leaky_relu(h, 0.2).flatten(1)
        mean, log_var = self.fc(h).chunk(2, dim=1)
        return mean, log_var


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        plan = list(reversed(config.channel_plan))
        s = config.bottleneck_size
        self.fc = nn.Linear(config.latent_dim, plan[0] * s * s)
        stages = []
        prev = plan[0]
        for c in plan:
            stages += [
                ResidualBlock(prev, c, config.norm),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c, c, 3, padding=1),
            ]
            prev = c
        self.stages = nn.Sequential(*stages)
        self.out = nn.Conv2d(prev, config.image_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        s = self.config.bottleneck_size
        h = self.fc(z).view(z.shape[0], -1, s, s)
        h = self.stages(h)
        return torch.sigmoid(self.out(F.leaky_relu(h, 0.2)))


class ClassifierHead(nn.Linear):
    """Linear map from latent space to ``k`` attribute logits plus one fake logit.

    Row ``i < k`` of ``weight`` is the latent direction of attribute ``i``;
    row ``k`` scores how fake an image looks.
    """

    def __init__(self, latent_dim: int, num_attributes: int):
        super().__init__(latent_dim, num_attributes + 1)
        self.num_attributes = num_attributes

    @property
    def fake_index(self) -> int:
        return self.num_attributes

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_features:
            raise InvalidInputError(
                f"latent dimension {z.shape[-1]} != classifier input {self.in_features}"
            )
        return super().forward(z)


def classify(z: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    """Logits ``weight @ z + bias``; columns ``0..k-1`` attributes, column ``k`` fake."""
    return head(z)


def attribute_direction(head: ClassifierHead, attribute_index: int) -> torch.Tensor:
    """Unit normal ``w_i / ||w_i||`` of attribute ``i``'s separating hyperplane."""
    if not 0 <= attribute_index < head.num_attributes:
        raise InvalidInputError(
            f"attribute index {attribute_index} out of range [0, {head.num_attributes})"
        )
    w = head.weight.detach()[attribute_index]
    norm = torch.linalg.vector_norm(w)
    if not torch.isfinite(norm) or norm.item() == 0.0:
        raise DegenerateDirectionError(f"attribute {attribute_index} has a zero-norm direction")
    return w / norm


class IntroVAC(nn.Module):
    """Encoder ``E``, decoder ``G`` and classifier ``C`` bundled together."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.head = ClassifierHead(config.latent_dim, config.num_attributes)

    @property
    def num_attributes(self) -> int:
        return self.config.num_attributes

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _check_images(self, x: torch.Tensor) -> torch.Tensor:
        c = self.config
        expected = (c.image_channels, c.image_size, c.image_size)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise InvalidInputError(f"expected images of shape (B, {expected}), got {tuple(x.shape)}")
        return x

    def encode(self, x: torch.Tensor) -> GaussianLatent:
        x = self._check_images(x)
        mean, log_var = self.encoder(x)
        return GaussianLatent(mean, log_var)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.config.latent_dim:
            raise InvalidInputError(
                f"latent dimension {z.shape[-1]} != model latent_dim {self.config.latent_dim}"
            )
        return self.decoder(z)

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(z)

    def encoder_classifier_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.head.parameters())

    def decoder_parameters(self) -> list[nn.Parameter]:
        return list(self.decoder.parameters())


def save_checkpoint(path: str | os.PathLike, payload: dict[str, Any]) -> None:
    """Write ``payload`` atomically (temp file in the same directory, then rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_payload(model: IntroVAC, **extra) -> dict[str, Any]:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "model_state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    payload.update(extra)
    return payload


def load_checkpoint(path: str | os.PathLike) -> dict[str, Any]:
    payload = torch.load(os.fspath(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint format_version {version!r}")
    return payload


def load_model(path_or_payload) -> IntroVAC:
    """Rebuild an :class:`IntroVAC` in eval mode from a checkpoint path or payload."""
    payload = path_or_payload
    if not isinstance(payload, dict):
        payload = load_checkpoint(payload)
    model = IntroVAC(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model
