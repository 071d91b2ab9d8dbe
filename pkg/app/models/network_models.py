"""Schemas describing networks, channels and kernels."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import InvalidChannelRefError

LayerKind = Literal["conv", "relu", "maxpool", "flatten", "linear"]


class LayerSpec(BaseModel):
    """One named layer of a sequential network."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1, description="Unique layer name", examples=["conv3"])
    kind: LayerKind
    out_channels: Optional[int] = Field(default=None, ge=1, description="conv only")
    kernel_size: Optional[int] = Field(default=None, ge=1, description="conv only")
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    pool_size: Optional[int] = Field(default=None, ge=1, description="maxpool only")
    out_features: Optional[int] = Field(default=None, ge=1, description="linear only")

    @model_validator(mode="after")
    def _check_kind_fields(self) -> "LayerSpec":
        if self.kind == "conv" and (self.out_channels is None or self.kernel_size is None):
            raise ValueError(f"conv layer '{self.name}' needs out_channels and kernel_size")
        if self.kind == "maxpool" and self.pool_size is None:
            raise ValueError(f"maxpool layer '{self.name}' needs pool_size")
        if self.kind == "linear" and self.out_features is None:
            raise ValueError(f"linear layer '{self.name}' needs out_features")
        return self


class TrainingMetadata(BaseModel):
    """Provenance stored alongside checkpoint parameters."""

    seed: int = 0
    epochs: int = Field(default=0, ge=0)
    final_accuracy: float = Field(default=0.0, ge=0, le=1)
    role: str = Field(default="baseline", examples=["baseline", "reference"])


class ChannelRef(BaseModel):
    """A (conv layer, channel) pair, written ``layer:channel``."""

    model_config = ConfigDict(frozen=True)

    layer: str
    channel: int = Field(..., ge=0)

    @classmethod
    def parse(cls, text: str) -> "ChannelRef":
        layer, sep, channel = text.rpartition(":")
        if not sep or not layer or not channel.isdigit():
            raise InvalidChannelRefError(f"expected 'layer:channel', got '{text}'")
        return cls(layer=layer, channel=int(channel))

    def __str__(self) -> str:
        return f"{self.layer}:{self.channel}"


class KernelId(BaseModel):
    """The kernel producing output channel ``out_channel`` of conv ``layer``."""

    model_config = ConfigDict(frozen=True)

    layer: str
    out_channel: int = Field(..., ge=0)

    def __str__(self) -> str:
        return f"{self.layer}:{self.out_channel}"
