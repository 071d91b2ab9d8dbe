"""Configuration sections nested inside RunConfig."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator

from app.errors import InvalidChannelRefError
from app.models.network_models import ChannelRef


def _parse_refs(values: list[str]) -> list[str]:
    for value in values:
        try:
            ChannelRef.parse(value)
        except InvalidChannelRefError as exc:
            raise ValueError(str(exc)) from exc
    return values


class DatasetSource(BaseModel):
    """Where the images D = {(x_i, y_i)} come from."""

    kind: Literal["cifar10-binary", "ppm-directory", "synthetic-blobs"] = "synthetic-blobs"
    root: Optional[Path] = Field(default=None, description="File or directory for on-disk sources")
    seed: int = Field(default=0, description="Generator seed for synthetic-blobs")
    class_count: int = Field(default=10, ge=2)
    image_shape: tuple[int, int, int] = (3, 32, 32)
    samples_per_class: int = Field(default=100, ge=1, description="synthetic-blobs only")
    max_records: Optional[int] = Field(default=None, ge=1, description="Truncate on-disk sources")


class TrainConfig(BaseModel):
    """Baseline and reference-embedder training."""

    epochs: int = Field(default=8, ge=0)
    lr: float = Field(default=0.01, gt=0)
    batch: int = Field(default=64, ge=1)
    reference_seed: int = Field(default=1, description="Seed of the independently trained embedder")


class FeatvisConfig(BaseModel):
    """Synthetic and natural feature visualization."""

    steps: int = Field(default=96, ge=1)
    lr: float = Field(default=1.0, gt=0, description="L2 length of each ascent step")
    jitter: int = Field(default=2, ge=0, description="Max random shift in pixels per step")
    topk: int = Field(default=9, ge=0)
    noise_threshold: float = Field(default=0.9, gt=0, description="TV ratio above which an image is noisy")
    layers: list[str] = Field(default_factory=lambda: ["conv4"])


class CircuitConfig(BaseModel):
    """Circuit discovery by SNIP attribution and structured pruning."""

    heads: list[str] = Field(default_factory=lambda: ["conv4:0"])
    sparsities: list[float] = Field(default_factory=lambda: [1.0, 0.6, 0.3])
    sample_count: int = Field(default=32, ge=1)
    scope: Literal["layer", "global"] = "layer"
    top_n: int = Field(default=4, ge=1, description="Nodes per layer in the exported graph")

    _check_heads = field_validator("heads")(_parse_refs)

    @field_validator("sparsities")
    @classmethod
    def _check_sparsities(cls, values: list[float]) -> list[float]:
        for value in values:
            if not 0 < value <= 1:
                raise ValueError(f"sparsity must be in (0, 1], got {value}")
        return values


class AttackConfig(BaseModel):
    """Hyperparameters of the fooling framework and both attack losses."""

    kind: Literal["proxpulse", "circuitbreaker"] = "proxpulse"
    alpha: float = Field(default=0.1, ge=0, le=1, description="Weight of the fooling loss")
    beta: float = Field(default=0.01, ge=0, description="Weight of the ranking loss")
    rho: float = Field(default=0.02, gt=0, description="L2 radius of the ball around fool targets")
    big_c: float = Field(
        default=1e3,
        gt=0,
        description="Numerator constant C of the inner loss, about 100x the typical squared channel norm",
    )
    lr: float = Field(default=1e-3, gt=0, description="Adam step size")
    epochs: int = Field(default=5, ge=0)
    batch: int = Field(default=64, ge=1)
    seed: int = 0
    target_layer: str = "conv4"
    heads: list[str] = Field(default_factory=list, description="Circuit heads as layer:channel")
    simultaneous: bool = Field(default=False, description="Attack all heads in one run")
    topinit_count: int = Field(default=50, ge=1)
    maintain_subset_size: int = Field(default=1024, ge=1)
    fool_set_size: int = Field(default=2, ge=1)
    fool_targets: list[Path] = Field(default_factory=list, description="PPM images; drawn from data if empty")
    margin: float = Field(default=0.0, ge=0, description="Hinge margin of the ranking loss")
    ranking_samples: int = Field(default=8, ge=1, description="Batch images used by the ranking term")
    divergence_factor: float = Field(default=10.0, gt=1)
    divergence_floor: float = Field(default=1.0, gt=0, description="Lower bound on the guard baseline, in nats")

    _check_heads = field_validator("heads")(_parse_refs)

    @property
    def head_refs(self) -> list[ChannelRef]:
        return [ChannelRef.parse(h) for h in self.heads]


class EvaluationConfig(BaseModel):
    """Metric computation for cmd_evaluate."""

    channels: list[str] = Field(default_factory=list, description="Empty = every channel of the attacked layer")
    subset_size: int = Field(default=512, ge=2, description="Images ranked for Kendall-tau / Pearson")

    _check_channels = field_validator("channels")(_parse_refs)
