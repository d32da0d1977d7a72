"""Two-phase IntroVAC training loop.

Each step follows the reference procedure line by line:

1. draw ``z_g`` from the prior and decode ``x_g = G(z_g)``;
2. encode the batch, sample ``z_r``, classify it, decode ``x_r = G(z_r)`` and
   ``x_rr = G(dt(z_r))``;
3. phase 1 loss, backward into every parameter, Adam step on encoder+classifier;
4. phase 2 loss, backward into the decoder only, Adam step on the decoder;
5. clear all gradients.

Decoder gradients are *not* cleared between phases, so the decoder update
uses the sum of its phase-1 (reconstruction) and phase-2 (adversarial)
gradients. In ``vac`` mode the adversarial terms are dropped and a single
Adam optimizer updates every parameter on the VAC objective.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import torch

from . import losses as L
from .data import ImageDataset, epoch_order, split_indices
from .distributions import kl_to_standard_normal, reparameterize
from .errors import DivergenceError, InvalidInputError
from .model import IntroVAC, ModelConfig, model_payload, save_checkpoint
from .seeding import derive_seed, generator_for

log = logging.getLogger(__name__)

MODES = ("vac", "introvac")


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 2e-4
    lr_decay_epochs: list[int] = field(default_factory=lambda: [60, 90, 120])
    lr_decay_factor: float = 2.0
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    checkpoint_every: int = 10
    mode: str = "introvac"
    loss_kind: str = "l1"
    val_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = L.LossWeights(**self.loss_weights)
        self.lr_decay_epochs = [int(e) for e in self.lr_decay_epochs]
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise InvalidInputError("epochs, batch_size and checkpoint_every must be positive")
        if not self.learning_rate > 0 or not self.lr_decay_factor > 0:
            raise InvalidInputError("learning_rate and lr_decay_factor must be positive")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise InvalidInputError("lr_decay_epochs must be strictly increasing")
        if self.lr_decay_epochs and self.lr_decay_epochs[-1] >= self.epochs:
            raise InvalidInputError("lr_decay_epochs must all be < epochs")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss_kind not in ("l1", "mse"):
            raise InvalidInputError("loss_kind must be 'l1' or 'mse'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidInputError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def apply_lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Learning rate for ``epoch``: divided by ``lr_decay_factor`` at every decay epoch reached."""
    n = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.learning_rate / config.lr_decay_factor**n


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0


def _item(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


class Trainer:
    """Owns the optimizers and the training random stream for one model.

    ``model`` only needs ``encode``/``decode``/``classify``,
    ``encoder_classifier_parameters``/``decoder_parameters`` and the
    ``latent_dim``/``num_attributes`` attributes, so toy models work too.
    """

    def __init__(self, model, config: TrainConfig):
        self.model = model
        self.config = config
        self.state = TrainState()
        self.generator = generator_for(config.seed, "train")
        ec = model.encoder_classifier_parameters()
        dec = model.decoder_parameters()
        lr = apply_lr_schedule(0, config)
        if config.mode == "introvac":
            self.opt_phase1 = torch.optim.Adam(ec, lr=lr)
            self.opt_phase2 = torch.optim.Adam(dec, lr=lr)
        else:
            self.opt_phase1 = torch.optim.Adam(ec + dec, lr=lr)
            self.opt_phase2 = None
        self._all_params = ec + dec

    @property
    def adversarial(self) -> bool:
        return self.config.mode == "introvac"

    def set_learning_rate(self, lr: float) -> None:
        for opt in (self.opt_phase1, self.opt_phase2):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr

    def zero_grad(self) -> None:
        for p in self._all_params:
            p.grad = None

    def train_step(self, x: torch.Tensor, y: torch.Tensor) -> L.LossReport:
        """One update on batch ``(x, y)``; raises :class:`DivergenceError` on a non-finite loss."""
        if x.shape[0] == 0:
            raise InvalidInputError("empty batch")
        if hasattr(self.model, "train"):
            self.model.train()
        if self.adversarial:
            report = self._introvac_step(x, y)
        else:
            report = self._vac_step(x, y)
        self.state.global_step += 1
        return report

    def _posterior_sample(self, x):
        q = self.model.encode(x)
        noise = torch.randn(q.mean.shape, generator=self.generator, dtype=q.mean.dtype)
        return q, reparameterize(q, noise)

    def _check(self, loss, report_fn):
        if not torch.isfinite(loss):
            self.zero_grad()
            report = report_fn()
            raise DivergenceError(
                f"non-finite loss at step {self.state.global_step}: {report.to_dict()}", report
            )

    def _vac_step(self, x, y) -> L.LossReport:
        w, k = self.config.loss_weights, self.model.num_attributes
        q, z_r = self._posterior_sample(x)
        logits = self.model.classify(z_r)
        x_r = self.model.decode(z_r)
        l_ae = L.reconstruction_loss(x, x_r, self.config.loss_kind)
        l_cl = L.classification_loss(y, logits[:, :k])
        l_reg = kl_to_standard_normal(q)
        total = w.beta_ae * l_ae + w.beta_cl * l_cl + w.beta_reg * l_reg

        def report():
            return L.LossReport(
                _item(l_ae), _item(l_cl), _item(l_reg), 0.0, 0.0, 0.0, 0.0, _item(total), 0.0
            )

        self._check(total, report)
        total.backward()
        self.opt_phase1.step()
        self.zero_grad()
        return report()

    def _introvac_step(self, x, y) -> L.LossReport:
        model, w, k = self.model, self.config.loss_weights, self.model.num_attributes
        z_g = torch.randn(x.shape[0], model.latent_dim, generator=self.generator, dtype=x.dtype)
        x_g = model.decode(z_g)
        q, z_r = self._posterior_sample(x)
        logits = model.classify(z_r)
        x_r = model.decode(z_r)
        x_rr = model.decode(z_r.detach())

        l_ae = L.reconstruction_loss(x, x_r, self.config.loss_kind)
        l_cl = L.classification_loss(y, logits[:, :k])
        l_reg = kl_to_standard_normal(q)
        l_ec_rec = L.encoder_classifier_fake_loss(x_rr, model)
        l_ec_gen = L.encoder_classifier_fake_loss(x_g, model)
        total1 = L.phase1_total(l_ae, l_cl, l_reg, l_ec_rec, l_ec_gen, w)
        parts = [l_ae, l_cl, l_reg, l_ec_rec, l_ec_gen]

        def report(l_g_rec=math.nan, l_g_gen=math.nan, total2=math.nan):
            return L.LossReport(*(_item(p) for p in parts), _item(l_g_rec), _item(l_g_gen),
                                _item(total1), _item(total2))

        self._check(total1, report)
        total1.backward()
        self.opt_phase1.step()

        # the decoder term sees the freshly updated encoder and classifier
        l_g_rec = L.decoder_reconstruction_loss(x_rr, y, model)
        l_g_gen = L.decoder_generated_loss(x_g, model)
        total2 = L.phase2_total(l_g_rec, l_g_gen, w)
        self._check(total2, lambda: report(l_g_rec, l_g_gen, total2))
        if total2.requires_grad:
            total2.backward()
        self.opt_phase2.step()
        self.zero_grad()
        return report(l_g_rec, l_g_gen, total2)

    # -- checkpoint plumbing -------------------------------------------------

    def state_dict(self) -> dict[str, Any]:
        d = {
            "train_config": self.config.to_dict(),
            "epoch": self.state.epoch,
            "global_step": self.state.global_step,
            "seed": self.config.seed,
            "rng_state": self.generator.get_state().clone(),
            "optimizer_state_phase1": self.opt_phase1.state_dict(),
        }
        if self.opt_phase2 is not None:
            d["optimizer_state_phase2"] = self.opt_phase2.state_dict()
        return d

    def load_state_dict(self, d: dict[str, Any]) -> None:
        saved_mode = d.get("train_config", {}).get("mode", self.config.mode)
        if saved_mode != self.config.mode:
            raise InvalidInputError(
                f"checkpoint was trained in {saved_mode!r} mode, cannot resume in {self.config.mode!r} mode"
            )
        self.state = TrainState(epoch=int(d["epoch"]), global_step=int(d["global_step"]))
        self.generator.set_state(d["rng_state"])
        self.opt_phase1.load_state_dict(d["optimizer_state_phase1"])
        if self.opt_phase2 is not None:
            if "optimizer_state_phase2" not in d:
                raise InvalidInputError("checkpoint lacks phase-2 optimizer state (trained in vac mode?)")
            self.opt_phase2.load_state_dict(d["optimizer_state_phase2"])

    def checkpoint_payload(self) -> dict[str, Any]:
        return model_payload(self.model, **self.state_dict())

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint_payload())


def build_model(config: ModelConfig, seed: int) -> IntroVAC:
    """Construct a model whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init"))
        return IntroVAC(config)


@dataclass
class FitResult:
    history: list[dict[str, Any]]
    checkpoints: list[str]
    final_checkpoint: str | None
    steps: int


class MetricsLog:
    """JSON-lines sink; one record per step and one summary per epoch."""

    def __init__(self, path=None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a" if append else "w")

    def write(self, record: dict[str, Any]) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def split_train_val(dataset: ImageDataset, config: TrainConfig) -> tuple[ImageDataset, ImageDataset | None]:
    if config.val_fraction == 0:
        return dataset, None
    train_idx, val_idx = split_indices(
        len(dataset), [1.0 - config.val_fraction, config.val_fraction], derive_seed(config.seed, "data")
    )
    return dataset.subset(train_idx), dataset.subset(val_idx)


def fit(
    dataset: ImageDataset,
    model,
    config: TrainConfig,
    output_dir=None,
    val_dataset: ImageDataset | None = None,
    resume_from: dict[str, Any] | None = None,
    stop_after_epoch: int | None = None,
    on_epoch_end: Callable[[int, Any], None] | None = None,
    progress=sys.stdout,
) -> FitResult:
    """Run ``config.epochs`` epochs of :meth:`Trainer.train_step` over ``dataset``.

    When ``val_dataset`` is ``None`` a seed-determined ``val_fraction`` of
    ``dataset`` is held out. Checkpoints land in ``output_dir`` as
    ``checkpoint_epoch_XXXX.pt`` every ``checkpoint_every`` epochs and as
    ``final.pt`` at the end; metrics go to ``metrics.jsonl``. ``resume_from``
    is a checkpoint payload to continue from (at the next epoch boundary).
    ``stop_after_epoch`` ends the run early, as if interrupted.
    """
    from .evaluation import classifier_accuracy, reconstruction_error

    if val_dataset is None:
        dataset, val_dataset = split_train_val(dataset, config)
    if len(dataset) == 0:
        raise InvalidInputError("empty training set")
    trainer = Trainer(model, config)
    if resume_from is not None:
        model.load_state_dict(resume_from["model_state"])
        trainer.load_state_dict(resume_from)

    out = Path(output_dir) if output_dir is not None else None
    metrics = MetricsLog(out / "metrics.jsonl" if out else None, append=resume_from is not None)
    history, checkpoints = [], []
    data_seed = derive_seed(config.seed, "data")
    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)

    def checkpoint(name):
        if out is None:
            return None
        path = out / name
        trainer.save(path)
        checkpoints.append(str(path))
        return str(path)

    try:
        while trainer.state.epoch < last_epoch:
            epoch = trainer.state.epoch
            lr = apply_lr_schedule(epoch, config)
            trainer.set_learning_rate(lr)
            sums: dict[str, float] = {}
            n_steps = 0
            order = epoch_order(len(dataset), data_seed, epoch)
            for x, y in dataset.batches(config.batch_size, order):
                try:
                    report = trainer.train_step(x, y)
                except DivergenceError:
                    if out is not None:
                        save_checkpoint(out / "postmortem.pt", trainer.checkpoint_payload())
                    raise
                rec = report.to_dict(adversarial=trainer.adversarial)
                metrics.write({"type": "step", "epoch": epoch, "step": trainer.state.global_step, **rec})
                for key, v in rec.items():
                    sums[key] = sums.get(key, 0.0) + v
                n_steps += 1
            trainer.state.epoch = epoch + 1
            summary = {"type": "epoch", "epoch": epoch, "lr": lr, "steps": n_steps,
                       **{k: v / max(n_steps, 1) for k, v in sums.items()}}
            if val_dataset is not None and len(val_dataset) > 0:
                acc = classifier_accuracy(val_dataset, model)
                summary["val_accuracy"] = [float(a) for a in acc]
                summary["val_l1"] = reconstruction_error(val_dataset, model)
            ckpt = None
            if trainer.state.epoch % config.checkpoint_every == 0 or trainer.state.epoch == config.epochs:
                ckpt = checkpoint(f"checkpoint_epoch_{trainer.state.epoch:04d}.pt")
            summary["checkpoint"] = Path(ckpt).name if ckpt else None
            metrics.write(summary)
            history.append(summary)
            if progress is not None:
                msg = f"epoch {epoch + 1}/{config.epochs} lr={lr:.2e}"
                msg += f" phase1={summary.get('total_phase1', float('nan')):.4f}"
                if "val_accuracy" in summary:
                    msg += f" val_acc={summary['val_accuracy']} val_l1={summary['val_l1']:.4f}"
                print(msg, file=progress, flush=True)
            if on_epoch_end is not None:
                on_epoch_end(epoch, trainer)
    finally:
        metrics.close()

    final = None
    if out is not None and trainer.state.epoch == config.epochs:
        final = str(out / "final.pt")
        trainer.save(final)
    return FitResult(history, checkpoints, final, trainer.state.global_step)
