"""Natural feature visualization: top-activating dataset images."""

from __future__ import annotations

import numpy as np
import torch
from pydantic import BaseModel, Field

from app.data.datasets import Dataset
from app.errors import InsufficientSamplesError
from app.featvis.activation import dataset_energy
from app.models.network_models import ChannelRef
from app.network.params import ModelParams


class TopKEntry(BaseModel):
    index: int = Field(..., ge=0, description="Position in the dataset")
    activation: float


class TopKResult(BaseModel):
    """Entries in non-increasing activation order, ties by lower index."""

    ref: ChannelRef
    entries: list[TopKEntry] = Field(default_factory=list)

    @property
    def indices(self) -> list[int]:
        return [e.index for e in self.entries]


def rank_by_activation(activations: np.ndarray) -> np.ndarray:
    """Indices sorted by activation descending, then index ascending."""
    index = np.arange(activations.shape[0])
    return np.lexsort((index, -activations.astype(np.float64)))


def natural_topk(params: ModelParams, dataset: Dataset, ref: ChannelRef, k: int) -> TopKResult:
    if k < 0 or k > len(dataset):
        raise InsufficientSamplesError(f"k={k} is outside [0, {len(dataset)}]")
    params.validate_ref(ref)
    if k == 0:
        return TopKResult(ref=ref)
    acts = dataset_energy(params, dataset.images, ref).to(torch.float64).numpy()
    order = rank_by_activation(acts)[:k]
    return TopKResult(ref=ref, entries=[TopKEntry(index=int(i), activation=float(acts[i])) for i in order])
