"""Labelled image datasets and their three on-disk / generated sources."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from app.errors import ArtifactIOError, ConfigError, DatasetParseError, EmptyDatasetError, ShapeMismatchError
from app.models.config_models import DatasetSource
from app.data.ppm import read_ppm

logger = logging.getLogger(__name__)

CIFAR_SHAPE = (3, 32, 32)
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
HOLDOUT_FRACTION = 10


@dataclass(eq=False)
class Dataset:
    """Images ``[N, C, H, W]`` in ``[0, 1]`` with integer labels ``[N]``."""

    images: torch.Tensor
    labels: torch.Tensor
    class_count: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.images.dim() != 4:
            raise ShapeMismatchError(f"dataset images must be [N, C, H, W], got {list(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeMismatchError("one label per image is required")
        self.images = self.images.to(torch.float32)
        self.labels = self.labels.to(torch.int64)
        if len(self) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.class_count):
            raise DatasetParseError(f"labels must lie in [0, {self.class_count})")
        if not self.class_names:
            self.class_names = [str(k) for k in range(self.class_count)]

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: torch.Tensor | list[int]) -> "Dataset":
        index = torch.as_tensor(indices, dtype=torch.int64)
        return Dataset(self.images[index], self.labels[index], self.class_count, list(self.class_names))

    def head(self, n: int) -> "Dataset":
        return self.subset(torch.arange(min(n, len(self))))

    def holdout_split(self) -> tuple["Dataset", "Dataset"]:
        """Split off the last tenth (at least one sample) as the held-out set."""
        n = len(self)
        held = max(1, n // HOLDOUT_FRACTION)
        if n - held < 1:
            raise EmptyDatasetError(f"need at least 2 samples to hold some out, got {n}")
        return self.subset(torch.arange(n - held)), self.subset(torch.arange(n - held, n))

    def batches(self, batch: int, generator: torch.Generator | None = None) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Yield ``(x, y)`` minibatches, shuffled when a generator is given."""
        n = len(self)
        order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            yield self.images[idx], self.labels[idx]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.class_count == other.class_count
            and torch.equal(self.images, other.images)
            and torch.equal(self.labels, other.labels)
        )


# ── Sources ───────────────────────────────────────────────────────────────────


def parse_cifar_records(raw: bytes, start_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split CIFAR-10 binary records (1 label byte + 3072 CHW pixel bytes)."""
    whole = len(raw) // CIFAR_RECORD_BYTES
    if len(raw) % CIFAR_RECORD_BYTES:
        offset = start_offset + whole * CIFAR_RECORD_BYTES
        raise DatasetParseError(
            f"truncated CIFAR-10 record at byte offset {offset} "
            f"({len(raw) - whole * CIFAR_RECORD_BYTES} of {CIFAR_RECORD_BYTES} bytes)",
            offset=offset,
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR_RECORD_BYTES)
    return records[:, 0].copy(), records[:, 1:].reshape(whole, *CIFAR_SHAPE).copy()


def _load_cifar(src: DatasetSource) -> Dataset:
    root = src.root
    files = sorted(root.glob("*.bin")) if root.is_dir() else [root]
    if not files:
        raise ConfigError(f"no CIFAR-10 .bin files under {root}")
    labels, pixels = [], []
    for path in files:
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ArtifactIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
        y, x = parse_cifar_records(raw)
        bad = np.nonzero(y >= src.class_count)[0]
        if bad.size:
            raise DatasetParseError(
                f"{path.name}: label {int(y[bad[0]])} out of range", offset=int(bad[0]) * CIFAR_RECORD_BYTES
            )
        labels.append(y)
        pixels.append(x)
        logger.info("Parsed %s: %d records", path.name, len(y))
    images = torch.from_numpy(np.concatenate(pixels).astype(np.float32) / 255.0)
    return Dataset(images, torch.from_numpy(np.concatenate(labels).astype(np.int64)), src.class_count)


def _load_ppm_directory(src: DatasetSource) -> Dataset:
    class_dirs = sorted(p for p in src.root.iterdir() if p.is_dir())
    if len(class_dirs) > src.class_count:
        raise DatasetParseError(f"{len(class_dirs)} class directories but class_count={src.class_count}")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.glob("*.ppm")):
            image = read_ppm(path)
            if images and image.shape != images[0].shape:
                raise DatasetParseError(
                    f"{path}: shape {list(image.shape)} differs from {list(images[0].shape)}"
                )
            images.append(image)
            labels.append(label)
    if not images:
        raise EmptyDatasetError(f"no .ppm files under {src.root}")
    names = [d.name for d in class_dirs] + [str(k) for k in range(len(class_dirs), src.class_count)]
    return Dataset(torch.stack(images), torch.tensor(labels), src.class_count, names)


def synthetic_blobs(
    class_count: int,
    samples_per_class: int,
    image_shape: tuple[int, int, int],
    seed: int,
    sigma: float = 0.18,
    jitter: float = 0.06,
) -> Dataset:
    """Render one Gaussian blob per image, class given by position and colour.

    Class centres sit on a circle around the image centre and each class has
    its own hue, so classes are separable by a linear read-out. Samples are
    interleaved by class so any prefix is roughly balanced.
    """
    generator = torch.Generator().manual_seed(seed)
    c, h, w = image_shape
    ys = torch.linspace(-1.0, 1.0, h).view(h, 1)
    xs = torch.linspace(-1.0, 1.0, w).view(1, w)

    angles = torch.arange(class_count, dtype=torch.float32) * (2 * math.pi / class_count)
    centres = 0.5 * torch.stack([torch.sin(angles), torch.cos(angles)], dim=1)
    hues = angles.view(-1, 1) + torch.tensor([0.0, 2.0, 4.0]) * (math.pi / 3)
    colours = 0.5 + 0.5 * torch.cos(hues)
    colours = colours[:, :c] if c <= 3 else colours.repeat(1, -(-c // 3))[:, :c]

    count = class_count * samples_per_class
    labels = torch.arange(count) % class_count
    offsets = torch.randn((count, 2), generator=generator) * jitter
    noise = torch.rand((count, c, h, w), generator=generator) * 0.1
    pos = centres[labels] + offsets
    dist2 = (ys.unsqueeze(0) - pos[:, 0].view(-1, 1, 1)) ** 2 + (xs.unsqueeze(0) - pos[:, 1].view(-1, 1, 1)) ** 2
    blob = torch.exp(-dist2 / (2 * sigma**2))
    images = (colours[labels].view(count, c, 1, 1) * blob.unsqueeze(1) + noise).clamp(0.0, 1.0)
    return Dataset(images, labels, class_count)


def load_dataset(src: DatasetSource) -> Dataset:
    """Materialise ``src`` as an in-memory :class:`Dataset`."""
    if src.kind == "synthetic-blobs":
        dataset = synthetic_blobs(src.class_count, src.samples_per_class, src.image_shape, src.seed)
    else:
        if src.root is None or not src.root.exists():
            raise ConfigError(f"dataset root {src.root} does not exist")
        if src.kind == "cifar10-binary":
            dataset = _load_cifar(src)
        elif src.kind == "ppm-directory":
            dataset = _load_ppm_directory(src)
        else:
            raise ConfigError(f"unknown dataset kind '{src.kind}'")
    if src.max_records is not None:
        dataset = dataset.head(src.max_records)
    logger.info(
        "Loaded %s dataset: %d images of shape %s, %d classes",
        src.kind, len(dataset), dataset.image_shape, dataset.class_count,
    )
    return dataset
