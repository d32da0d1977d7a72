"""Run configuration files (YAML).

Schema::

    seed: 0                      # top-level seed; sub-streams are derived from it
    output_dir: runs/example
    model:                       # required: image_size, latent_dim, channel_plan
      image_size: 32
      image_channels: 3
      latent_dim: 32
      channel_plan: [32, 64, 128]
      num_attributes: 2          # defaults to the dataset's attribute count
      norm: batch                # batch | none
    train:                       # required: epochs
      epochs: 20
      batch_size: 64
      learning_rate: 0.0002
      lr_decay_epochs: []
      lr_decay_factor: 2.0
      checkpoint_every: 1
      mode: introvac             # introvac | vac
      loss_kind: l1              # l1 | mse
      val_fraction: 0.1
      loss_weights: {beta_ae: 100, beta_cl: 10, beta_reg: 3, beta_g: 5, beta_ec: 0.01}
    data:                        # required: kind
      kind: synthetic            # synthetic | celeba
      count: 2000                # synthetic only
      test_count: 300
      num_attributes: 2
      correlation: 0.0
      # celeba: root_path, attribute_file, image_dir, selected_attributes,
      #         merge_groups, split_seed, split_fractions, balance
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import InvalidInputError
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(InvalidInputError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


REQUIRED = {
    "model": ("image_size", "latent_dim", "channel_plan"),
    "train": ("epochs",),
    "data": ("kind",),
}

SYNTHETIC_DEFAULTS = {"count": 2000, "test_count": 300, "num_attributes": 2, "correlation": 0.0}
CELEBA_FIELDS = {"root_path", "attribute_file", "image_dir", "selected_attributes", "merge_groups",
                 "split_seed", "split_fractions", "balance"}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict[str, Any]
    output_dir: str
    seed: int

    def to_dict(self) -> dict[str, Any]:
        model = self.model.to_dict()
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "model": model,
            "train": self.train.to_dict(),
            "data": copy.deepcopy(self.data),
        }


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name)
    if sec is None:
        raise ConfigError(name, "missing required section")
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a mapping")
    for key in REQUIRED.get(name, ()):
        if key not in sec:
            raise ConfigError(f"{name}.{key}", "missing required field")
    return dict(sec)


def _build(cls, field_prefix: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"{field_prefix}.{key}", "unknown field")
    try:
        return cls(**values)
    except InvalidInputError as exc:
        raise ConfigError(field_prefix, str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(field_prefix, str(exc)) from None


def parse_config(raw: dict[str, Any], overrides: dict[str, Any] | None = None) -> RunConfig:
    """Validate a raw mapping (plus flag overrides) into a :class:`RunConfig`.

    ``overrides`` keys: ``seed``, ``mode``, ``output_dir``, ``epochs``.
    """
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    raw = copy.deepcopy(raw)
    seed = int(overrides.get("seed", raw.get("seed", 0)))
    output_dir = overrides.get("output_dir", raw.get("output_dir"))
    if output_dir is None:
        raise ConfigError("output_dir", "missing required field")

    data = _section(raw, "data")
    kind = data["kind"]
    if kind == "synthetic":
        for key in data:
            if key not in SYNTHETIC_DEFAULTS and key not in ("kind", "seed", "image_size"):
                raise ConfigError(f"data.{key}", "unknown field for synthetic data")
        data = {**SYNTHETIC_DEFAULTS, **data}
        if data["num_attributes"] not in (1, 2):
            raise ConfigError("data.num_attributes", "synthetic data supports 1 or 2 attributes")
        data.setdefault("seed", seed)
        n_attr = int(data["num_attributes"])
        names = ["glasses", "beard"][:n_attr]
    elif kind == "celeba":
        for key in data:
            if key not in CELEBA_FIELDS | {"kind"}:
                raise ConfigError(f"data.{key}", "unknown field for celeba data")
        if "root_path" not in data:
            raise ConfigError("data.root_path", "missing required field")
        names = data.get("selected_attributes")
        if not names:
            raise ConfigError("data.selected_attributes", "missing required field")
        n_attr = len(names)
    else:
        raise ConfigError("data.kind", f"must be 'synthetic' or 'celeba', got {kind!r}")

    model_raw = _section(raw, "model")
    model_raw.setdefault("num_attributes", n_attr)
    model_raw.setdefault("attribute_names", list(names))
    if model_raw["num_attributes"] != n_attr:
        raise ConfigError("model.num_attributes", f"dataset provides {n_attr} attributes")
    if kind == "synthetic":
        data.setdefault("image_size", model_raw["image_size"])
    model = _build(ModelConfig, "model", model_raw)

    train_raw = _section(raw, "train")
    train_raw["seed"] = seed
    if "mode" in overrides:
        train_raw["mode"] = overrides["mode"]
    if "epochs" in overrides:
        train_raw["epochs"] = int(overrides["epochs"])
    train = _build(TrainConfig, "train", train_raw)

    unknown = set(raw) - {"seed", "output_dir", "model", "train", "data"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level field")
    return RunConfig(model=model, train=train, data=data, output_dir=str(output_dir), seed=seed)


def load_config(path, overrides: dict[str, Any] | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"YAML parse error: {exc}") from None
    return parse_config(raw or {}, overrides)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
