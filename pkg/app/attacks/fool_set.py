"""D_fool: the target images whose neighbourhoods the attack pushes up."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from app.data.datasets import Dataset
from app.data.ppm import read_ppm
from app.errors import FoolSetError

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class FoolSet:
    """Target images ``[M, C, H, W]`` in ``[0, 1]`` and where they came from."""

    targets: torch.Tensor
    sources: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.targets.dim() != 4 or self.targets.shape[0] == 0:
            raise FoolSetError("the fool set needs at least one [C, H, W] target")
        if bool((self.targets < 0).any()) or bool((self.targets > 1).any()):
            raise FoolSetError("fool targets must lie in [0, 1]")
        self.targets = self.targets.detach().to(torch.float32)
        if not self.sources:
            self.sources = [f"target{i}" for i in range(len(self))]

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def check_shape(self, input_shape: tuple[int, int, int]) -> None:
        if tuple(self.targets.shape[1:]) != tuple(input_shape):
            raise FoolSetError(
                f"fool targets have shape {list(self.targets.shape[1:])}, model expects {list(input_shape)}"
            )

    def check_excludes(self, synth_images: torch.Tensor, rho: float) -> None:
        """Every target must be farther than ``rho`` (L2) from every initial synthetic image."""
        if synth_images.numel() == 0:
            return
        flat_t = self.targets.reshape(len(self), -1).to(torch.float64)
        flat_s = synth_images.reshape(synth_images.shape[0], -1).to(torch.float64)
        closest = float(torch.cdist(flat_t, flat_s).min())
        if closest <= rho:
            raise FoolSetError(f"a fool target lies within {closest:.4g} <= rho={rho} of an initial synthetic image")

    @classmethod
    def from_paths(cls, paths: list[Path]) -> "FoolSet":
        if not paths:
            raise FoolSetError("no fool target paths given")
        return cls(torch.stack([read_ppm(p) for p in paths]), [str(p) for p in paths])

    @classmethod
    def from_dataset(cls, dataset: Dataset, count: int, seed: int) -> "FoolSet":
        """Draw ``count`` images from distinct classes where possible."""
        if count < 1 or count > len(dataset):
            raise FoolSetError(f"cannot draw {count} fool targets from {len(dataset)} images")
        generator = torch.Generator().manual_seed(seed)
        order = torch.randperm(len(dataset), generator=generator).tolist()
        chosen: list[int] = []
        seen: set[int] = set()
        for index in order:
            label = int(dataset.labels[index])
            if label not in seen:
                chosen.append(index)
                seen.add(label)
            if len(chosen) == count:
                break
        for index in order:
            if len(chosen) == count:
                break
            if index not in chosen:
                chosen.append(index)
        logger.info("Fool targets drawn from dataset: %s", chosen)
        return cls(dataset.images[chosen].clone(), [f"dataset[{i}]" for i in chosen])
