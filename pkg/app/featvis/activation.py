"""The channel-activation scalar shared by featvis, circuits, attacks and metrics."""

from __future__ import annotations

import torch

from app.autodiff import ops
from app.errors import ShapeMismatchError
from app.models.network_models import ChannelRef
from app.network.mini_alexnet import forward_with_activations
from app.network.params import ModelParams

EVAL_BATCH = 256


def channel_map(
    params: ModelParams,
    x: torch.Tensor,
    ref: ChannelRef,
    kernel_masks: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Activation map ``[N, H, W]`` of channel ``ref``."""
    params.validate_ref(ref)
    acts = forward_with_activations(params, x, upto=ref.layer, kernel_masks=kernel_masks)
    return acts[ref.layer][:, ref.channel]


def channel_energy(
    params: ModelParams,
    x: torch.Tensor,
    ref: ChannelRef,
    kernel_masks: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Differentiable ``||f^(l,j)(x)||^2`` per image, shape ``[N]``."""
    return ops.squared_norm(channel_map(params, x, ref, kernel_masks), dims=(1, 2))


def layer_energy(params: ModelParams, x: torch.Tensor, layer: str) -> torch.Tensor:
    """Squared norm of every channel map of ``layer``, shape ``[N, C]``."""
    params.width(layer)
    acts = forward_with_activations(params, x, upto=layer)
    return ops.squared_norm(acts[layer], dims=(2, 3))


@torch.no_grad()
def dataset_energy(
    params: ModelParams,
    images: torch.Tensor,
    ref: ChannelRef,
    kernel_masks: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """:func:`channel_energy` over many images, evaluated in fixed-size chunks."""
    chunks = [
        channel_energy(params, images[i : i + EVAL_BATCH], ref, kernel_masks)
        for i in range(0, images.shape[0], EVAL_BATCH)
    ]
    return torch.cat(chunks) if chunks else torch.empty(0)


def channel_activation(params: ModelParams, x: torch.Tensor, ref: ChannelRef) -> float:
    """Squared Frobenius norm of one image's channel map."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1:
        raise ShapeMismatchError(f"channel_activation takes one image, got shape {list(x.shape)}")
    with torch.no_grad():
        return float(channel_energy(params, x, ref)[0])
