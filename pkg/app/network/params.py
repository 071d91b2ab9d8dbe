"""ModelParams: the parameters of a sequential CNN plus its layer list."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from app.errors import InvalidChannelRefError, ModelConfigError, UnknownLayerError
from app.models.network_models import ChannelRef, LayerSpec

Shape3 = tuple[int, int, int]


def infer_shapes(layers: list[LayerSpec], input_shape: Shape3) -> dict[str, tuple[int, ...]]:
    """Output shape (without batch axis) of every layer, validating the chain."""
    names = [spec.name for spec in layers]
    if len(set(names)) != len(names):
        raise ModelConfigError(f"layer names must be unique: {names}")

    shape: tuple[int, ...] = tuple(input_shape)
    shapes: dict[str, tuple[int, ...]] = {}
    for spec in layers:
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ModelConfigError(f"conv layer '{spec.name}' needs a 3-D input, got {shape}")
            c, h, w = shape
            k, s, p = spec.kernel_size, spec.stride, spec.padding
            spans = (h + 2 * p - k, w + 2 * p - k)
            if min(spans) < 0 or any(span % s for span in spans):
                raise ModelConfigError(f"conv layer '{spec.name}' does not fit input {shape}")
            shape = (spec.out_channels, spans[0] // s + 1, spans[1] // s + 1)
        elif spec.kind == "maxpool":
            if len(shape) != 3 or min(shape[1:]) < spec.pool_size:
                raise ModelConfigError(f"maxpool layer '{spec.name}' does not fit input {shape}")
            shape = (shape[0], shape[1] // spec.pool_size, shape[2] // spec.pool_size)
        elif spec.kind == "flatten":
            flat = 1
            for dim in shape:
                flat *= dim
            shape = (flat,)
        elif spec.kind == "linear":
            if len(shape) != 1:
                raise ModelConfigError(f"linear layer '{spec.name}' needs a flat input, got {shape}")
            shape = (spec.out_features,)
        shapes[spec.name] = shape
    return shapes


@dataclass(eq=False)
class ModelParams:
    """Ordered map layer name -> (kernel, bias) for every conv/linear layer.

    Conv kernels are ``[Cout, Cin, K, K]`` and linear weights ``[O, D]``.
    The layer list travels with the parameters so every operation can
    walk the graph.
    """

    layers: list[LayerSpec]
    tensors: dict[str, tuple[torch.Tensor, torch.Tensor]]
    input_shape: Shape3
    class_count: int
    shapes: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.input_shape = tuple(self.input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        in_channels = self.input_shape[0]
        for spec in self.layers:
            if spec.kind not in ("conv", "linear"):
                if spec.name in self.tensors:
                    raise ModelConfigError(f"layer '{spec.name}' ({spec.kind}) takes no parameters")
                continue
            if spec.name not in self.tensors:
                raise ModelConfigError(f"missing parameters for layer '{spec.name}'")
            kernel, bias = self.tensors[spec.name]
            if spec.kind == "conv":
                expected = (spec.out_channels, in_channels, spec.kernel_size, spec.kernel_size)
                in_channels = spec.out_channels
            else:
                expected = (spec.out_features, self._flat_input(spec.name))
            if tuple(kernel.shape) != expected or tuple(bias.shape) != (expected[0],):
                raise ModelConfigError(
                    f"layer '{spec.name}' expects kernel {expected}, got {tuple(kernel.shape)}"
                )
        if set(self.tensors) - {s.name for s in self.layers}:
            raise ModelConfigError("parameters given for unknown layers")
        last = self.layers[-1]
        if last.kind != "linear" or last.out_features != self.class_count:
            raise ModelConfigError(f"the final layer must be linear with {self.class_count} outputs")

    def _flat_input(self, name: str) -> int:
        idx = self.layer_names.index(name)
        prev = self.shapes[self.layers[idx - 1].name] if idx else self.input_shape
        return prev[0]

    # ── Lookup ────────────────────────────────────────────────────────────

    @property
    def layer_names(self) -> list[str]:
        return [spec.name for spec in self.layers]

    @property
    def conv_layers(self) -> list[str]:
        return [spec.name for spec in self.layers if spec.kind == "conv"]

    def layer_spec(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise UnknownLayerError(f"unknown layer '{name}'")

    def kernel(self, name: str) -> torch.Tensor:
        return self.tensors[name][0]

    def bias(self, name: str) -> torch.Tensor:
        return self.tensors[name][1]

    def width(self, layer: str) -> int:
        spec = self.layer_spec(layer)
        if spec.kind != "conv":
            raise InvalidChannelRefError(f"layer '{layer}' is not a conv layer")
        return spec.out_channels

    def ancestors(self, layer: str) -> list[str]:
        """Conv layers strictly before ``layer``."""
        self.layer_spec(layer)
        position = self.layer_names.index(layer)
        return [c for c in self.conv_layers if self.layer_names.index(c) < position]

    def validate_ref(self, ref: ChannelRef) -> ChannelRef:
        if ref.layer not in self.layer_names:
            raise InvalidChannelRefError(f"unknown layer in channel ref '{ref}'")
        if not 0 <= ref.channel < self.width(ref.layer):
            raise InvalidChannelRefError(
                f"channel {ref.channel} out of range for '{ref.layer}' (width {self.width(ref.layer)})"
            )
        return ref

    def parameters(self) -> list[torch.Tensor]:
        return [t for spec in self.layers if spec.name in self.tensors for t in self.tensors[spec.name]]

    def parameter_count(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def kernel_count(self) -> int:
        """Number of conv kernels (Cout * Cin summed over conv layers)."""
        return sum(self.kernel(name).shape[0] * self.kernel(name).shape[1] for name in self.conv_layers)

    # ── Copies ────────────────────────────────────────────────────────────

    def clone(self, requires_grad: bool = False) -> "ModelParams":
        """Deep copy; the copy's tensors are leaves."""
        tensors = {
            name: (k.detach().clone().requires_grad_(requires_grad), b.detach().clone().requires_grad_(requires_grad))
            for name, (k, b) in self.tensors.items()
        }
        return ModelParams(
            layers=list(self.layers),
            tensors=tensors,
            input_shape=self.input_shape,
            class_count=self.class_count,
        )

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of layer lists and every parameter."""
        if self.layers != other.layers or list(self.tensors) != list(other.tensors):
            return False
        return all(
            torch.equal(a, b)
            for name in self.tensors
            for a, b in zip(self.tensors[name], other.tensors[name])
        )
