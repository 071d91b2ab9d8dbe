"""SNIP kernel attribution toward a circuit head.

For one input the score of kernel ``(l', k)`` is the mean over its weights of
``|w * d(sum of head map)/dw|``; table scores average that over inputs.
"""

from __future__ import annotations

import logging

import torch

from app.autodiff import gradients
from app.data.datasets import Dataset
from app.errors import InsufficientSamplesError
from app.featvis.activation import channel_map
from app.models.circuit_models import AttributionTable, KernelScore
from app.models.network_models import ChannelRef
from app.network.params import ModelParams

logger = logging.getLogger(__name__)


def attribution_layers(params: ModelParams, head: ChannelRef) -> list[str]:
    """Ancestor conv layers of the head followed by the head layer."""
    return [*params.ancestors(head.layer), head.layer]


def kernel_attributions(
    params: ModelParams,
    head: ChannelRef,
    images: torch.Tensor,
    create_graph: bool = False,
) -> dict[str, torch.Tensor]:
    """Per-layer score vectors ``[Cout]`` averaged over ``images``.

    For the head layer only the head kernel's entry is meaningful; other
    head-layer kernels do not feed the head map and score zero. With
    ``create_graph=True`` the scores stay differentiable w.r.t. ``params``
    (which must then hold grad-requiring tensors); otherwise a detached
    copy of the parameters is differentiated.
    """
    params.validate_ref(head)
    work = params if create_graph else params.clone(requires_grad=True)
    layers = attribution_layers(work, head)
    kernels = [work.kernel(name) for name in layers]

    totals = [torch.zeros(k.shape[0], dtype=torch.float64) for k in kernels]
    for i in range(images.shape[0]):
        value = channel_map(work, images[i : i + 1], head).sum()
        grads = gradients(value, kernels, create_graph=create_graph)
        for j, (kernel, grad) in enumerate(zip(kernels, grads)):
            totals[j] = totals[j] + (kernel * grad).abs().to(torch.float64).mean(dim=(1, 2, 3))

    n = max(images.shape[0], 1)
    scores = {name: (total / n).to(k.dtype) for name, total, k in zip(layers, totals, kernels)}
    if not create_graph:
        scores = {name: s.detach() for name, s in scores.items()}
    return scores


def snip_attribution(
    params: ModelParams,
    head: ChannelRef,
    dataset_subset: Dataset | torch.Tensor,
    sample_count: int,
) -> AttributionTable:
    """Attribution table over the first ``sample_count`` images of the subset."""
    images = dataset_subset.images if isinstance(dataset_subset, Dataset) else dataset_subset
    if sample_count < 1 or sample_count > images.shape[0]:
        raise InsufficientSamplesError(
            f"sample_count={sample_count} but the subset holds {images.shape[0]} images"
        )
    scores = kernel_attributions(params, head, images[:sample_count])

    entries: list[KernelScore] = []
    for layer, vector in scores.items():
        weight_count = int(params.kernel(layer)[0].numel()) + 1
        channels = [head.channel] if layer == head.layer else range(vector.shape[0])
        for channel in channels:
            entries.append(
                KernelScore(layer=layer, channel=channel, score=float(vector[channel]), weight_count=weight_count)
            )
    logger.info("SNIP attribution for %s: %d kernels over %d samples", head, len(entries), sample_count)
    return AttributionTable(head=head, sample_count=sample_count, entries=entries)
