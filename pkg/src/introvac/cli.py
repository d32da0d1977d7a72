"""Command-line interface.

Every command writes its artifacts plus a ``manifest.json`` into
``--output-dir``. The manifest records the exact argument vector, so
``introvac <manifest argv>`` regenerates the same files.

Exit codes: 0 success, 1 unexpected failure, 2 invalid input/config,
3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (
    DatasetSpec,
    ImageDataset,
    build_attribute_subset,
    generate_synthetic,
    load_celeba_format,
    load_image,
    materialize,
    save_image,
)
from .errors import DivergenceError, IntroVACError, InvalidInputError
from .evaluation import evaluate_reconstruction_fid, get_embedder, reconstruct
from .latent_ops import LangevinConfig, langevin_sample, manipulate, manipulate_auto, generate_from_prior
from .model import load_checkpoint, load_model
from .plotting import plot_fid_by_epoch, plot_image_panel, plot_loss_curves, read_metrics, save_montage, save_triptychs
from .seeding import derive_seed
from .trainer import build_model, fit

log = logging.getLogger("introvac")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class UsageError(IntroVACError):
    """Bad command-line arguments (exit code 2)."""


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, argv: Sequence[str], seed, extra: dict) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"
                   and not p.name.startswith("."))
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "version": __version__,
        **extra,
        "outputs": {str(p.relative_to(out)): sha256(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------------------
# data helpers


def load_run_data(cfg: RunConfig) -> tuple[ImageDataset, ImageDataset | None, ImageDataset]:
    """``(train, val, test)`` for a run; ``val`` is ``None`` when the trainer holds it out."""
    d = cfg.data
    if d["kind"] == "synthetic":
        n = int(d["num_attributes"])
        train = generate_synthetic(int(d["count"]), int(d["image_size"]), n, int(d["seed"]),
                                   float(d["correlation"]))
        test = generate_synthetic(int(d["test_count"]), int(d["image_size"]), n,
                                  derive_seed(int(d["seed"]), "test"), float(d["correlation"]))
        return train, None, test
    spec = DatasetSpec(
        root_path=d["root_path"],
        attribute_file=d.get("attribute_file", "list_attr_celeba.txt"),
        image_dir=d.get("image_dir", "images"),
        selected_attributes=d.get("selected_attributes"),
        merge_groups=d.get("merge_groups", []),
        image_size=cfg.model.image_size,
        image_channels=cfg.model.image_channels,
        split_seed=int(d.get("split_seed", cfg.seed)),
        split_fractions=d.get("split_fractions", [0.8, 0.1, 0.1]),
    )
    splits = load_celeba_format(spec)
    if d.get("balance"):
        names = splits["train"].attribute_names
        splits["train"] = build_attribute_subset(splits["train"], names, balance=True, seed=cfg.seed)
    return splits["train"], splits["val"], splits["test"]


def list_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise UsageError(f"no images in {path}")
        return files
    if not path.exists():
        raise UsageError(f"input {path} does not exist")
    return [path]


def load_inputs(path: Path, model) -> tuple[list[Path], torch.Tensor]:
    files = list_images(path)
    c = model.config
    return files, torch.stack([load_image(p, c.image_size, c.image_channels) for p in files])


def resolve_attribute(model, name: str) -> int:
    names = model.config.attribute_names
    if name in names:
        return names.index(name)
    if name.isdigit() and int(name) < len(names):
        return int(name)
    raise UsageError(f"unknown attribute {name!r}; checkpoint knows {names}")


def parse_assignments(items: Sequence[str], flag: str) -> list[tuple[str, float]]:
    out = []
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{flag} expects NAME=VALUE, got {item!r}")
        name, value = item.split("=", 1)
        try:
            out.append((name.strip(), float(value)))
        except ValueError:
            raise UsageError(f"{flag} value for {name!r} is not a number: {value!r}") from None
    return out


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "mode": args.mode,
                                    "output_dir": args.output_dir, "epochs": args.epochs})
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    train, val, test = load_run_data(cfg)
    model = build_model(cfg.model, cfg.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        result = fit(train, model, cfg.train, output_dir=out, val_dataset=val, resume_from=resume,
                     progress=None if args.quiet else sys.stdout)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    records = read_metrics(out / "metrics.jsonl")
    plot_loss_curves(records, out / "loss_curves.png", title=f"{cfg.train.mode} training losses")
    summary = {
        "mode": cfg.train.mode,
        "steps": result.steps,
        "final_checkpoint": Path(result.final_checkpoint).name if result.final_checkpoint else None,
        "checkpoints": [Path(c).name for c in result.checkpoints],
        "num_train": len(train),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(out, "train", args.argv, cfg.seed, {"config": cfg.to_dict(), "steps": result.steps})
    return 0


def require_checkpoint(args) -> str:
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    return args.checkpoint


def cmd_reconstruct(args) -> int:
    require_checkpoint(args)
    model = load_model(args.checkpoint)
    files, x = load_inputs(Path(args.input), model)
    out = Path(args.output_dir)
    (out / "reconstructions").mkdir(parents=True, exist_ok=True)
    x_r = reconstruct(model, x)
    for f, img in zip(files, x_r):
        save_image(out / "reconstructions" / f"{f.stem}.png", img)
    pairs = torch.stack([x, x_r], dim=1).reshape(-1, *x.shape[1:])
    save_montage(out / "reconstruction_grid.png", pairs, nrow=2 * min(4, len(files)))
    l1 = (x_r - x).abs().mean(dim=(1, 2, 3))
    with open(out / "reconstruction_error.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "l1_error"])
        for f, e in zip(files, l1.tolist()):
            w.writerow([f.name, f"{e:.8f}"])
    write_manifest(out, "reconstruct", args.argv, None, {"checkpoint": str(args.checkpoint),
                                                         "num_images": len(files)})
    return 0


def cmd_manipulate(args) -> int:
    require_checkpoint(args)
    model = load_model(args.checkpoint)
    deltas = [(resolve_attribute(model, n), v) for n, v in parse_assignments(args.delta, "--delta")]
    targets = [(resolve_attribute(model, n), int(v)) for n, v in parse_assignments(args.auto, "--auto")]
    if bool(deltas) == bool(targets):
        raise UsageError("give either --delta NAME=VALUE or --auto NAME=LABEL (not both)")
    if targets and any(t not in (0, 1) for _, t in targets):
        raise UsageError("--auto labels must be 0 or 1")
    files, x = load_inputs(Path(args.input), model)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if deltas:
        res = manipulate(model, x, deltas)
        indices = [i for i, _ in deltas]
    else:
        res = manipulate_auto(model, x, targets, threshold=args.threshold)
        indices = [i for i, _ in targets]
    names = model.config.attribute_names
    norms = model.head.weight.detach().norm(dim=1)
    for j, f in enumerate(files):
        save_triptychs(out / f"{f.stem}_triptych.png", x[j : j + 1], res.x_rec[j : j + 1], res.x_aug[j : j + 1])
        save_image(out / f"{f.stem}_edited.png", res.x_aug[j])
        sidecar = {
            "input": f.name,
            "deltas": {names[i]: float(res.deltas[j, n]) for n, i in enumerate(indices)},
            "direction_norms": {names[i]: float(norms[i]) for i in indices},
            "logits_before": {names[i]: float(res.logits_before[j, i]) for i in range(len(names))},
            "logits_after": {names[i]: float(res.logits_after[j, i]) for i in range(len(names))},
            "fake_logit_before": float(res.logits_before[j, -1]),
            "fake_logit_after": float(res.logits_after[j, -1]),
        }
        (out / f"{f.stem}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    save_triptychs(out / "triptychs.png", x, res.x_rec, res.x_aug, per_row=2)
    write_manifest(out, "manipulate", args.argv, None, {"checkpoint": str(args.checkpoint),
                                                        "num_images": len(files)})
    return 0


def cmd_generate(args) -> int:
    require_checkpoint(args)
    model = load_model(args.checkpoint)
    out = Path(args.output_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    images = generate_from_prior(model, args.count, args.seed)
    for i, img in enumerate(images):
        save_image(out / "samples" / f"sample_{i:04d}.png", img)
    save_montage(out / "samples_grid.png", images, nrow=min(8, args.count))
    write_manifest(out, "generate", args.argv, args.seed, {"checkpoint": str(args.checkpoint),
                                                           "count": args.count})
    return 0


def cmd_langevin(args) -> int:
    require_checkpoint(args)
    model = load_model(args.checkpoint)
    names = model.config.attribute_names
    targets = dict((resolve_attribute(model, n), int(v)) for n, v in parse_assignments(args.target, "--target"))
    if set(targets) != set(range(len(names))):
        raise UsageError(f"--target must assign a label to every attribute: {names}")
    cfg = LangevinConfig(
        target_labels=[targets[i] for i in range(len(names))],
        step_size=args.step_size,
        steps=args.steps,
        num_chains=args.chains,
        reject_misclassified=not args.no_reject,
        seed=args.seed,
    )
    out = Path(args.output_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    res = langevin_sample(cfg, model)
    for n, img in zip(res.chain_indices, res.images):
        save_image(out / "samples" / f"chain_{n:05d}.png", img)
    np.save(out / "latents.npy", res.latents.detach().numpy())
    if res.empty:
        print("warning: no Langevin samples were accepted", file=sys.stderr)
    else:
        save_montage(out / "samples_grid.png", res.images, nrow=min(8, res.num_accepted))
    extra = {
        "checkpoint": str(args.checkpoint),
        "config": {"target_labels": dict(zip(names, cfg.target_labels)), "step_size": cfg.step_size,
                   "steps": cfg.steps, "num_chains": cfg.num_chains,
                   "reject_misclassified": cfg.reject_misclassified},
        "num_accepted": res.num_accepted,
        "num_rejected": res.num_rejected,
        "num_discarded": res.num_discarded,
        "acceptance_rate": res.acceptance_rate,
        "accepted_chains": res.chain_indices,
    }
    write_manifest(out, "langevin-sample", args.argv, args.seed, extra)
    return 0


def _evaluation_data(args, model):
    if args.config:
        cfg = load_config(args.config)
        _, _, test = load_run_data(cfg)
        return test, f"{cfg.data['kind']}:test"
    if args.data_dir:
        c = model.config
        spec = DatasetSpec(root_path=args.data_dir, selected_attributes=c.attribute_names,
                           image_size=c.image_size, image_channels=c.image_channels,
                           split_fractions=[0.0, 0.0, 1.0])
        return load_celeba_format(spec)["test"], str(args.data_dir)
    raise UsageError("evaluate needs --config or --data-dir")


def cmd_evaluate(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = [Path(args.checkpoint)] if args.checkpoint else []
    if args.checkpoint_dir:
        checkpoints += sorted(Path(args.checkpoint_dir).glob("checkpoint_epoch_*.pt"))
    if not checkpoints:
        raise UsageError("evaluate needs --checkpoint or --checkpoint-dir")
    rows = []
    dataset = dataset_name = None
    for ckpt in checkpoints:
        payload = load_checkpoint(ckpt)
        model = load_model(payload)
        if dataset is None:
            dataset, dataset_name = _evaluation_data(args, model)
        embedder = get_embedder(args.embedder, model)
        report = evaluate_reconstruction_fid(model, dataset, embedder)
        report.update(checkpoint=str(ckpt), dataset=dataset_name, seed=args.seed,
                      epoch=payload.get("epoch"))
        rows.append(report)
    if len(rows) == 1:
        (out / "report.json").write_text(json.dumps(rows[0], indent=2, sort_keys=True) + "\n")
    else:
        (out / "report.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        names = [f"accuracy_{i}" for i in range(len(rows[0]["accuracy_per_attribute"]))]
        w.writerow(["checkpoint", "epoch", "fid_reconstruction", "l1_error", *names])
        for r in rows:
            w.writerow([r["checkpoint"], r["epoch"], f"{r['fid_reconstruction']:.8f}",
                        f"{r['l1_error']:.8f}", *[f"{a:.6f}" for a in r["accuracy_per_attribute"]]])
    epochs = [r["epoch"] for r in rows if r["epoch"] is not None]
    if len(epochs) == len(rows) and len(rows) > 1:
        plot_fid_by_epoch(epochs, [r["fid_reconstruction"] for r in rows], out / "fid_by_epoch.png")
    sample = dataset.images[: min(8, len(dataset))]
    model = load_model(checkpoints[-1])
    plot_image_panel(torch.cat([sample, reconstruct(model, sample)]), out / "reconstruction_panel.png",
                     ncols=len(sample))
    write_manifest(out, "evaluate", args.argv, args.seed, {"num_checkpoints": len(rows)})
    return 0


def cmd_synth_data(args) -> int:
    ds = generate_synthetic(args.count, args.image_size, args.num_attributes, args.seed, args.correlation)
    out = Path(args.output_dir)
    materialize(ds, out)
    write_manifest(out, "synth-data", args.argv, args.seed,
                   {"count": args.count, "image_size": args.image_size,
                    "attributes": ds.attribute_names,
                    "label_frequency": ds.labels.mean(dim=0).tolist()})
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="introvac", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True, seed_default=0):
        sp.add_argument("--config")
        if checkpoint:
            sp.add_argument("--checkpoint")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--output-dir", required=True)
        sp.add_argument("--mode", choices=("vac", "introvac"))
        return sp

    sp = sub.add_parser("train", help="train a model from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output-dir")
    sp.add_argument("--mode", choices=("vac", "introvac"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("reconstruct", help="encode and decode images"))
    sp.add_argument("--input", required=True, help="image file or directory")
    sp.set_defaults(func=cmd_reconstruct)

    sp = common(sub.add_parser("manipulate", help="edit attributes along classifier directions"))
    sp.add_argument("--input", required=True, help="image file or directory")
    sp.add_argument("--delta", action="append", default=[], metavar="NAME=DELTA")
    sp.add_argument("--auto", action="append", default=[], metavar="NAME=LABEL",
                    help="grow the shift until the edited image is confidently classified")
    sp.add_argument("--threshold", type=float, default=0.9)
    sp.set_defaults(func=cmd_manipulate)

    sp = common(sub.add_parser("generate", help="decode samples from the prior"))
    sp.add_argument("--count", type=int, default=16)
    sp.set_defaults(func=cmd_generate)

    sp = common(sub.add_parser("langevin-sample", help="conditional generation by Langevin sampling"))
    sp.add_argument("--target", action="append", default=[], metavar="NAME=LABEL")
    sp.add_argument("--step-size", type=float, default=2e-4)
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--chains", type=int, default=64)
    sp.add_argument("--no-reject", action="store_true")
    sp.set_defaults(func=cmd_langevin)

    sp = common(sub.add_parser("evaluate", help="reconstruction Frechet distance, L1 and accuracy"))
    sp.add_argument("--checkpoint-dir", help="evaluate every checkpoint_epoch_*.pt in this directory")
    sp.add_argument("--data-dir", help="CelebA-format directory to evaluate on (all images)")
    sp.add_argument("--embedder", default="pixels8")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("synth-data", help="write a synthetic dataset in CelebA layout"), checkpoint=False)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--num-attributes", type=int, default=2, choices=(1, 2))
    sp.add_argument("--correlation", type=float, default=0.0)
    sp.set_defaults(func=cmd_synth_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
