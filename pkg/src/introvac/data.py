"""Datasets: CelebA-format ingestion, attribute subsets and a synthetic stand-in.

The CelebA attribute file layout is::

    <number of images>
    <attr_1> <attr_2> ... <attr_n>
    <filename> <+1|-1> ... <+1|-1>

Labels of ``-1`` become ``0``.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import InsufficientDataError, InvalidInputError

log = logging.getLogger(__name__)


class AttributeParseError(InvalidInputError):
    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


@dataclass
class ImageDataset:
    """In-memory images ``(N, C, H, W)`` in ``[0, 1]`` with binary labels ``(N, k)``."""

    images: torch.Tensor
    labels: torch.Tensor
    attribute_names: list[str]
    filenames: list[str] | None = None
    skipped: int = 0

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("images and labels disagree on the number of items")
        if self.labels.dim() != 2 or self.labels.shape[1] != len(self.attribute_names):
            raise InvalidInputError("labels must be (N, k) with one column per attribute name")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx):
        return self.images[idx], self.labels[idx]

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    def subset(self, indices) -> "ImageDataset":
        indices = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        names = None
        if self.filenames is not None:
            names = [self.filenames[i] for i in indices.tolist()]
        return ImageDataset(self.images[indices], self.labels[indices], list(self.attribute_names), names)

    def batches(self, batch_size: int, order: Sequence[int] | None = None):
        """Yield ``(images, labels)`` batches following ``order`` (default: stored order)."""
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[start : start + batch_size])
            yield self.images[idx], self.labels[idx]


# ----------------------------------------------------------------------------
# attribute text format


@dataclass
class AttributeTable:
    attribute_names: list[str]
    filenames: list[str]
    values: np.ndarray  # (N, n_attr) of +1/-1

    def labels(self, selected: Sequence[str] | None = None) -> np.ndarray:
        """0/1 labels for ``selected`` columns (all columns when ``None``)."""
        if selected is None:
            cols = list(range(len(self.attribute_names)))
        else:
            missing = [s for s in selected if s not in self.attribute_names]
            if missing:
                raise InvalidInputError(f"attributes not in attribute file: {missing}")
            cols = [self.attribute_names.index(s) for s in selected]
        return (self.values[:, cols] > 0).astype(np.int64)


def parse_attribute_text(text: str) -> AttributeTable:
    lines = text.splitlines()
    if len(lines) < 2:
        raise AttributeParseError("attribute file needs a count line and a header line")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise AttributeParseError(f"expected an image count, got {lines[0]!r}", 1) from None
    names = lines[1].split()
    if not names:
        raise AttributeParseError("empty attribute header", 2)
    filenames, rows = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(names) + 1:
            raise AttributeParseError(
                f"expected {len(names) + 1} fields, found {len(parts)}", lineno
            )
        try:
            vals = [int(v) for v in parts[1:]]
        except ValueError:
            raise AttributeParseError("attribute values must be integers", lineno) from None
        if any(v not in (-1, 1) for v in vals):
            raise AttributeParseError("attribute values must be +1 or -1", lineno)
        filenames.append(parts[0])
        rows.append(vals)
    if len(rows) != count:
        raise AttributeParseError(f"header declares {count} images, found {len(rows)}", 1)
    values = np.asarray(rows, dtype=np.int64).reshape(len(rows), len(names))
    return AttributeTable(names, filenames, values)


def read_attribute_file(path: str | os.PathLike) -> AttributeTable:
    return parse_attribute_text(Path(path).read_text())


def format_attribute_table(table: AttributeTable) -> str:
    out = [str(len(table.filenames)), " ".join(table.attribute_names)]
    for name, row in zip(table.filenames, table.values):
        out.append(name + " " + " ".join(f"{int(v):2d}" for v in row))
    return "\n".join(out) + "\n"


def merge_attributes(labels: np.ndarray, names: Sequence[str], groups) -> tuple[np.ndarray, list[str]]:
    """Append one OR-ed column per ``(new_name, [source names])`` group."""
    names = list(names)
    cols = [labels]
    for new_name, sources in groups:
        idx = [names.index(s) for s in sources]
        cols.append(labels[:, idx].max(axis=1, keepdims=True))
        names.append(new_name)
    return np.concatenate(cols, axis=1), names


# ----------------------------------------------------------------------------
# image files


def load_image(path: str | os.PathLike, image_size: int, channels: int = 3) -> torch.Tensor:
    """Center-crop to a square, resize to ``image_size`` and scale to ``[0, 1]``."""
    with Image.open(path) as img:
        img = img.convert("RGB" if channels == 3 else "L")
        w, h = img.size
        s = min(w, h)
        left, top = (w - s) // 2, (h - s) // 2
        img = img.crop((left, top, left + s, top + s))
        if s != image_size:
            img = img.resize((image_size, image_size), Image.BICUBIC)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def save_image(path: str | os.PathLike, image: torch.Tensor) -> None:
    """Write a ``(C, H, W)`` tensor in ``[0, 1]`` as a lossless PNG."""
    arr = image.detach().cpu().clamp(0, 1).mul(255).round().to(torch.uint8).numpy()
    arr = arr.transpose(1, 2, 0)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


# ----------------------------------------------------------------------------
# splits


def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Disjoint index sets covering ``range(n)``; the last set takes the remainder."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise InvalidInputError("split fractions round to more items than available")
    out, start = [], 0
    for s in sizes:
        out.append(np.sort(perm[start : start + s]))
        start += s
    return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffled iteration order for one epoch, a pure function of ``(seed, epoch)``."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetSpec:
    root_path: str
    attribute_file: str = "list_attr_celeba.txt"
    selected_attributes: list[str] | None = None
    merge_groups: list[tuple[str, list[str]]] = field(default_factory=list)
    image_size: int = 32
    image_channels: int = 3
    image_dir: str = "images"
    split_seed: int = 0
    split_fractions: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])

    def __post_init__(self):
        self.merge_groups = [(str(n), list(s)) for n, s in self.merge_groups]
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise InvalidInputError("split_fractions must have three entries summing to 1")

    def to_dict(self):
        return dataclasses.asdict(self)


def load_celeba_format(spec: DatasetSpec) -> dict[str, ImageDataset]:
    """Load images and labels described by ``spec``, split into train/val/test.

    Merge groups are applied before column selection, so a merged name may be
    selected. Missing image files are skipped and counted in ``skipped``.
    """
    root = Path(spec.root_path)
    table = read_attribute_file(root / spec.attribute_file)
    labels = table.labels()
    names = list(table.attribute_names)
    for _, sources in spec.merge_groups:
        missing = [s for s in sources if s not in names]
        if missing:
            raise InvalidInputError(f"merge sources not in attribute file: {missing}")
    labels, names = merge_attributes(labels, names, spec.merge_groups)
    selected = spec.selected_attributes or names
    missing = [s for s in selected if s not in names]
    if missing:
        raise InvalidInputError(f"selected attributes not in attribute file: {missing}")
    labels = labels[:, [names.index(s) for s in selected]]

    images, keep, skipped = [], [], 0
    image_root = root / spec.image_dir
    for i, fname in enumerate(table.filenames):
        path = image_root / fname
        if not path.exists():
            skipped += 1
            continue
        images.append(load_image(path, spec.image_size, spec.image_channels))
        keep.append(i)
    if skipped:
        log.warning("skipped %d missing image files under %s", skipped, image_root)
    if not images:
        raise InsufficientDataError(f"no images found under {image_root}")
    full = ImageDataset(
        torch.stack(images),
        torch.as_tensor(labels[keep], dtype=torch.float32),
        list(selected),
        [table.filenames[i] for i in keep],
    )
    parts = split_indices(len(full), spec.split_fractions, spec.split_seed)
    out = {name: full.subset(idx) for name, idx in zip(SPLIT_NAMES, parts)}
    for ds in out.values():
        ds.skipped = skipped
    return out


def build_attribute_subset(
    dataset: ImageDataset,
    attributes: str | Sequence[str],
    balance: bool = False,
    seed: int = 0,
) -> ImageDataset:
    """Restrict labels to ``attributes`` and optionally balance the label patterns.

    Balancing downsamples every observed label pattern (positive/negative for
    one attribute, joint patterns for several) to the rarest pattern's count.
    """
    if isinstance(attributes, str):
        attributes = [attributes]
    missing = [a for a in attributes if a not in dataset.attribute_names]
    if missing:
        raise InvalidInputError(f"unknown attributes {missing}")
    cols = [dataset.attribute_names.index(a) for a in attributes]
    labels = dataset.labels[:, cols]
    out = ImageDataset(dataset.images, labels, list(attributes), dataset.filenames)
    if not balance:
        return out
    lab = labels.numpy().astype(np.int64)
    codes = lab @ (1 << np.arange(lab.shape[1]))
    wanted = range(1 << lab.shape[1])
    groups = [np.flatnonzero(codes == c) for c in wanted]
    if any(len(g) == 0 for g in groups):
        raise InsufficientDataError("a label pattern has no items; cannot balance")
    n = min(len(g) for g in groups)
    rng = np.random.default_rng(seed)
    keep = np.sort(np.concatenate([rng.choice(g, n, replace=False) for g in groups]))
    return out.subset(keep)


# ----------------------------------------------------------------------------
# synthetic faces


SYNTHETIC_ATTRIBUTES = ("glasses", "beard")


def _sample_labels(rng, count: int, k: int, correlation: float) -> np.ndarray:
    if k == 1:
        return (rng.random((count, 1)) < 0.5).astype(np.int64)
    if not -1.0 <= correlation <= 1.0:
        raise InvalidInputError("correlation must lie in [-1, 1]")
    # joint pattern probabilities for Bernoulli(1/2) marginals with correlation rho
    p_same = (1.0 + correlation) / 4.0
    p_diff = (1.0 - correlation) / 4.0
    patterns = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
    idx = rng.choice(4, size=count, p=[p_same, p_diff, p_diff, p_same])
    return patterns[idx]


def synthetic_geometry(rng, count: int, image_size: int) -> dict[str, np.ndarray]:
    s = image_size
    return {
        "cx": s / 2 + rng.uniform(-0.06, 0.06, count) * s,
        "cy": s / 2 + rng.uniform(-0.06, 0.06, count) * s,
        "rx": rng.uniform(0.28, 0.36, count) * s,
        "ry": rng.uniform(0.36, 0.44, count) * s,
        "face": rng.uniform(0.55, 0.95, (count, 3)),
        "bg": rng.uniform(0.0, 0.35, (count, 3)),
    }


def marker_masks(geom: dict[str, np.ndarray], i: int, image_size: int) -> dict[str, np.ndarray]:
    """Boolean ``(H, W)`` masks of the face and of each marker region for item ``i``."""
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    cx, cy, rx, ry = (geom[k][i] for k in ("cx", "cy", "rx", "ry"))
    u, v = (xx - cx) / rx, (yy - cy) / ry
    face = u**2 + v**2 <= 1.0
    glasses = (np.abs(u) <= 0.85) & (v >= -0.45) & (v <= -0.2)
    beard = face & (v >= 0.3) & (v <= 0.9)
    return {"face": face, "glasses": glasses, "beard": beard}


def render_synthetic(
    geom: dict[str, np.ndarray], labels: np.ndarray, noise: np.ndarray, image_size: int
) -> np.ndarray:
    """Render ``(N, 3, H, W)`` images quantized to 8-bit levels."""
    n = labels.shape[0]
    out = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i in range(n):
        m = marker_masks(geom, i, image_size)
        img = geom["bg"][i][:, None, None] + noise[i, 0]
        img = np.where(m["face"], geom["face"][i][:, None, None], img)
        if labels.shape[1] > 1 and labels[i, 1]:
            texture = 0.12 + 0.5 * noise[i, 1].clip(0, None)
            img = np.where(m["beard"], 0.22 * geom["face"][i][:, None, None] + texture, img)
        if labels[i, 0]:
            img = np.where(m["glasses"], 0.06, img)
        out[i] = img
    return np.round(np.clip(out, 0.0, 1.0) * 255.0) / 255.0


def generate_synthetic(
    count: int,
    image_size: int = 32,
    num_attributes: int = 2,
    seed: int = 0,
    correlation: float = 0.0,
    return_geometry: bool = False,
):
    """Procedural "faces" with a glasses bar (attribute 0) and a beard patch (attribute 1).

    Each face is a filled ellipse of random colour and position on a noisy
    background. Attributes are independent Bernoulli(1/2) unless
    ``correlation`` is non-zero. Pixel values are multiples of 1/255, so a PNG
    round trip is exact.
    """
    if num_attributes not in (1, 2):
        raise InvalidInputError("synthetic data supports 1 or 2 attributes")
    if image_size < 16:
        raise InvalidInputError("synthetic images need image_size >= 16")
    rng = np.random.default_rng(seed)
    labels = _sample_labels(rng, count, num_attributes, correlation)
    geom = synthetic_geometry(rng, count, image_size)
    noise = rng.normal(0.0, 0.05, (count, 2, image_size, image_size))
    noise[:, 1] = rng.normal(0.0, 0.15, (count, image_size, image_size))
    images = render_synthetic(geom, labels, noise, image_size)
    ds = ImageDataset(
        torch.from_numpy(images),
        torch.as_tensor(labels, dtype=torch.float32),
        list(SYNTHETIC_ATTRIBUTES[:num_attributes]),
        [f"{i:06d}.png" for i in range(count)],
    )
    if return_geometry:
        return ds, {"geometry": geom, "noise": noise}
    return ds


def materialize(dataset: ImageDataset, root: str | os.PathLike, image_dir: str = "images",
                attribute_file: str = "list_attr_celeba.txt") -> Path:
    """Write ``dataset`` to disk as PNG files plus a CelebA-format attribute file."""
    root = Path(root)
    (root / image_dir).mkdir(parents=True, exist_ok=True)
    names = dataset.filenames or [f"{i:06d}.png" for i in range(len(dataset))]
    for name, img in zip(names, dataset.images):
        save_image(root / image_dir / name, img)
    values = np.where(dataset.labels.numpy() > 0.5, 1, -1).astype(np.int64)
    table = AttributeTable(list(dataset.attribute_names), list(names), values)
    (root / attribute_file).write_text(format_attribute_table(table))
    return root
