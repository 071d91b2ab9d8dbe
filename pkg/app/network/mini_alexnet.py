"""MiniAlexNet: the desk-scale CNN family, its initialisation and forward pass.

Four 3x3 "same"-padded conv layers (16/32/32/32 channels), ReLU after each,
2x2 max-pooling after conv1 and conv2, then flatten and one linear head.
"""

from __future__ import annotations

import logging
import math

import torch

from app.autodiff import ops
from app.errors import ModelConfigError, UnknownLayerError
from app.models.network_models import LayerSpec
from app.network.params import ModelParams, Shape3, infer_shapes

logger = logging.getLogger(__name__)

END = "end"
FEATURES_KEY = "flatten"
LOGITS_KEY = "logits"

MINI_ALEXNET_WIDTHS = (16, 32, 32, 32)
MIN_INPUT_SIZE = 16


def mini_alexnet_layers(class_count: int) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    for i, width in enumerate(MINI_ALEXNET_WIDTHS, start=1):
        layers.append(LayerSpec(name=f"conv{i}", kind="conv", out_channels=width, kernel_size=3, padding=1))
        layers.append(LayerSpec(name=f"relu{i}", kind="relu"))
        if i <= 2:
            layers.append(LayerSpec(name=f"pool{i}", kind="maxpool", pool_size=2))
    layers.append(LayerSpec(name=FEATURES_KEY, kind="flatten"))
    layers.append(LayerSpec(name="fc", kind="linear", out_features=class_count))
    return layers


def build_network(layers: list[LayerSpec], input_shape: Shape3, class_count: int, seed: int) -> ModelParams:
    """Kaiming-uniform initialisation of an arbitrary sequential layer list."""
    shapes = infer_shapes(layers, input_shape)
    generator = torch.Generator().manual_seed(seed)
    tensors: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    prev: tuple[int, ...] = tuple(input_shape)
    for spec in layers:
        if spec.kind == "conv":
            kernel_shape = (spec.out_channels, prev[0], spec.kernel_size, spec.kernel_size)
        elif spec.kind == "linear":
            kernel_shape = (spec.out_features, prev[0])
        else:
            prev = shapes[spec.name]
            continue
        fan_in = math.prod(kernel_shape[1:])
        bound = math.sqrt(6.0 / fan_in)
        kernel = (torch.rand(kernel_shape, generator=generator) * 2 - 1) * bound
        bias_bound = 1.0 / math.sqrt(fan_in)
        bias = (torch.rand((kernel_shape[0],), generator=generator) * 2 - 1) * bias_bound
        tensors[spec.name] = (kernel.float(), bias.float())
        prev = shapes[spec.name]
    return ModelParams(layers=layers, tensors=tensors, input_shape=input_shape, class_count=class_count)


def build_mini_alexnet(
    input_shape: Shape3, class_count: int, seed: int
) -> tuple[list[LayerSpec], ModelParams]:
    """Build MiniAlexNet for ``input_shape = (C, H, W)`` and ``class_count`` classes."""
    if min(input_shape[1:]) < MIN_INPUT_SIZE:
        raise ModelConfigError(
            f"MiniAlexNet needs spatial size >= {MIN_INPUT_SIZE}, got {tuple(input_shape[1:])}"
        )
    layers = mini_alexnet_layers(class_count)
    params = build_network(layers, input_shape, class_count, seed)
    logger.info(
        "Built MiniAlexNet input=%s classes=%d params=%d seed=%d",
        tuple(input_shape), class_count, params.parameter_count(), seed,
    )
    return layers, params


# ── Forward ───────────────────────────────────────────────────────────────────


def _masked(kernel: torch.Tensor, bias: torch.Tensor, keep: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    if keep is None or bool(keep.all()):
        return kernel, bias
    scale = keep.to(kernel.dtype)
    return kernel * scale[:, None, None, None], bias * scale


def forward_with_activations(
    params: ModelParams,
    x: torch.Tensor,
    upto: str = END,
    kernel_masks: dict[str, torch.Tensor] | None = None,
) -> dict[str, torch.Tensor]:
    """Run the network and collect activations.

    Returns a map holding, for every conv layer reached, its rectified
    activation map ``[N, C, H, W]`` (the output of the ReLU that follows it),
    the flattened penultimate features under ``"flatten"``, and the logits
    under ``"logits"`` when ``upto`` is ``"end"``. ``kernel_masks`` zeroes
    the kernels and biases of pruned output channels per conv layer.
    """
    if upto != END and upto not in params.layer_names:
        raise UnknownLayerError(f"unknown layer '{upto}'")
    kernel_masks = kernel_masks or {}

    acts: dict[str, torch.Tensor] = {}
    h = x
    pending: str | None = None
    for spec in params.layers:
        if pending is not None and spec.kind != "relu":
            acts[pending] = h
            if pending == upto:
                return acts
            pending = None

        if spec.kind == "conv":
            kernel, bias = _masked(params.kernel(spec.name), params.bias(spec.name), kernel_masks.get(spec.name))
            h = ops.conv2d(h, kernel, bias, stride=spec.stride, padding=spec.padding)
            pending = spec.name
            continue
        if spec.kind == "relu":
            h = ops.relu(h)
            if pending is not None:
                acts[pending] = h
                reached = pending == upto
                pending = None
                if reached:
                    return acts
        elif spec.kind == "maxpool":
            h = ops.maxpool2d(h, spec.pool_size)
        elif spec.kind == "flatten":
            h = ops.flatten(h)
            acts[spec.name] = h
        elif spec.kind == "linear":
            h = ops.linear(h, params.kernel(spec.name), params.bias(spec.name))
        if spec.name == upto:
            return acts

    if pending is not None:
        acts[pending] = h
    acts[LOGITS_KEY] = h
    return acts


def logits(params: ModelParams, x: torch.Tensor) -> torch.Tensor:
    return forward_with_activations(params, x)[LOGITS_KEY]


def penultimate(params: ModelParams, x: torch.Tensor) -> torch.Tensor:
    """Input of the final linear layer, flattened to ``[N, D]``."""
    flat = [spec.name for spec in params.layers if spec.kind == "flatten"]
    if not flat:
        raise UnknownLayerError("network has no flatten layer before its head")
    return forward_with_activations(params, x, upto=flat[-1])[flat[-1]]
