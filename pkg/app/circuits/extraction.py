"""Circuit extraction by structured kernel pruning, and masked execution."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch

from app.data.datasets import Dataset
from app.errors import (
    InsufficientSamplesError,
    KernelSetMismatchError,
    ShapeMismatchError,
    ZeroVarianceError,
)
from app.featvis.activation import channel_map, dataset_energy
from app.models.circuit_models import AttributionTable, CircuitMask, KernelKeep, KernelScore
from app.network.params import ModelParams

logger = logging.getLogger(__name__)

# keeps floor(s * width) stable when s * width is an integer up to rounding
_FLOOR_SLACK = 1e-9


def _ranked(entries: list[KernelScore], layer_order: list[str]) -> list[KernelScore]:
    """Score descending; ties by model order, then lower channel index."""
    return sorted(entries, key=lambda e: (-e.score, layer_order.index(e.layer), e.channel))


def layer_keep_count(sparsity: float, width: int) -> int:
    return max(1, min(width, math.floor(sparsity * width + _FLOOR_SLACK)))


def extract_circuit(table: AttributionTable, sparsity: float, scope: str = "layer") -> CircuitMask:
    """Keep the top-attributed kernels of each ancestor layer.

    ``scope="layer"`` keeps ``max(1, floor(sparsity * width))`` kernels in
    every ancestor layer. ``scope="global"`` ranks all ancestor kernels
    together and keeps the longest prefix whose weight count stays within
    ``sparsity`` of the total. The head kernel is always kept and is the
    only kept kernel of the head layer.
    """
    if not 0 < sparsity <= 1:
        raise ValueError(f"sparsity must be in (0, 1], got {sparsity}")
    if not table.entries:
        raise KernelSetMismatchError("cannot extract a circuit from an empty attribution table")

    head = table.head
    layers = table.layers
    ancestors = [layer for layer in layers if layer != head.layer]
    kept: set[tuple[str, int]] = {(head.layer, head.channel)}

    if scope == "layer":
        for layer in ancestors:
            entries = table.layer_entries(layer)
            top = _ranked(entries, layers)[: layer_keep_count(sparsity, len(entries))]
            kept.update((e.layer, e.channel) for e in top)
    elif scope == "global":
        pool = [e for e in table.entries if e.layer != head.layer]
        budget = sparsity * sum(e.weight_count for e in pool) + _FLOOR_SLACK
        used = 0
        for e in _ranked(pool, layers):
            if used + e.weight_count > budget and used > 0:
                break
            used += e.weight_count
            kept.add((e.layer, e.channel))
    else:
        raise ValueError(f"unknown retention scope '{scope}'")

    entries = [
        KernelKeep(layer=e.layer, channel=e.channel, keep=(e.layer, e.channel) in kept)
        for e in table.entries
    ]
    mask = CircuitMask(head=head, sparsity=sparsity, scope=scope, entries=entries)
    logger.debug("circuit %s @ %.3f (%s): kept %d of %d kernels", head, sparsity, scope, len(kept), len(entries))
    return mask


def kernel_masks(params: ModelParams, mask: CircuitMask) -> dict[str, torch.Tensor]:
    """Boolean keep vectors per ancestor conv layer of the mask's head.

    Head-layer kernels other than the head never reach the head map, so the
    head layer runs unmasked.
    """
    params.validate_ref(mask.head)
    ancestors = params.ancestors(mask.head.layer)
    masks: dict[str, torch.Tensor] = {}
    for layer in mask.layers:
        if layer == mask.head.layer:
            continue
        if layer not in ancestors:
            raise ShapeMismatchError(f"mask layer '{layer}' is not an ancestor of {mask.head} in this model")
        width = params.width(layer)
        channels = [e.channel for e in mask.entries if e.layer == layer]
        if sorted(channels) != list(range(width)):
            raise ShapeMismatchError(f"mask covers {len(channels)} kernels of '{layer}', model has {width}")
        keep = torch.zeros(width, dtype=torch.bool)
        keep[mask.kept(layer)] = True
        masks[layer] = keep
    return masks


def circuit_forward(params: ModelParams, mask: CircuitMask, x: torch.Tensor) -> torch.Tensor:
    """Head channel map ``[N, H, W]`` with pruned kernels' weights and biases zeroed."""
    return channel_map(params, x, mask.head, kernel_masks(params, mask))


# ── Functional faithfulness ───────────────────────────────────────────────────


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Two-pass Pearson correlation in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"series lengths differ: {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    va, vb = float(np.dot(da, da)), float(np.dot(db, db))
    if va == 0.0 or vb == 0.0:
        raise ZeroVarianceError("Pearson correlation is undefined for a constant series")
    if np.array_equal(a, b):
        return 1.0
    return float(np.dot(da, db)) / math.sqrt(va * vb)


def head_pearson(params: ModelParams, mask: CircuitMask, dataset_subset: Dataset | torch.Tensor) -> float:
    """Correlation of per-image head activation with and without the mask."""
    images = dataset_subset.images if isinstance(dataset_subset, Dataset) else dataset_subset
    if images.shape[0] < 3:
        raise InsufficientSamplesError(f"head_pearson needs at least 3 images, got {images.shape[0]}")
    masked = dataset_energy(params, images, mask.head, kernel_masks(params, mask))
    full = dataset_energy(params, images, mask.head)
    return pearson(masked.numpy(), full.numpy())
