"""Schemas for kernel attributions, circuit masks and circuit graphs.

All three serialize to JSON as flat (layer, channel, value) records so a
circuit can be reloaded without recomputing attributions.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from app.models.network_models import ChannelRef, KernelId


class KernelScore(BaseModel):
    layer: str
    channel: int = Field(..., ge=0)
    score: float = Field(..., ge=0, description="Mean |w * df/dw| over the kernel's weights and inputs")
    weight_count: int = Field(default=1, ge=1, description="Weights plus bias of this kernel")

    @property
    def kernel(self) -> KernelId:
        return KernelId(layer=self.layer, out_channel=self.channel)


class AttributionTable(BaseModel):
    """SNIP scores for every ancestor kernel of a head plus the head kernel."""

    head: ChannelRef
    sample_count: int = Field(..., ge=1)
    entries: list[KernelScore]

    @model_validator(mode="after")
    def _unique_kernels(self) -> "AttributionTable":
        keys = [(e.layer, e.channel) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("attribution table lists a kernel twice")
        return self

    @property
    def scores(self) -> dict[KernelId, float]:
        return {e.kernel: e.score for e in self.entries}

    @property
    def layers(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.layer not in seen:
                seen.append(e.layer)
        return seen

    def layer_entries(self, layer: str) -> list[KernelScore]:
        return sorted((e for e in self.entries if e.layer == layer), key=lambda e: e.channel)

    def layer_scores(self, layer: str) -> list[float]:
        return [e.score for e in self.layer_entries(layer)]

    def score(self, layer: str, channel: int) -> float:
        for e in self.entries:
            if e.layer == layer and e.channel == channel:
                return e.score
        raise KeyError(f"{layer}:{channel}")


class KernelKeep(BaseModel):
    layer: str
    channel: int = Field(..., ge=0)
    keep: bool


class CircuitMask(BaseModel):
    """Which kernels survive at a given sparsity (fraction of weights kept)."""

    head: ChannelRef
    sparsity: float = Field(..., gt=0, le=1)
    scope: Literal["layer", "global"] = "layer"
    entries: list[KernelKeep]

    @property
    def keep(self) -> dict[KernelId, bool]:
        return {KernelId(layer=e.layer, out_channel=e.channel): e.keep for e in self.entries}

    @property
    def layers(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.layer not in seen:
                seen.append(e.layer)
        return seen

    def kept(self, layer: str) -> list[int]:
        return sorted(e.channel for e in self.entries if e.layer == layer and e.keep)

    def kept_set(self) -> set[tuple[str, int]]:
        return {(e.layer, e.channel) for e in self.entries if e.keep}


class GraphNode(BaseModel):
    layer: str
    channel: int
    attribution: float
    image: Optional[str] = Field(default=None, description="Synthetic featvis image shown in the node")
    is_head: bool = False

    @property
    def node_id(self) -> str:
        return f"{self.layer}_{self.channel}"

    @property
    def label(self) -> str:
        return f"{self.layer}:{self.channel}"


class GraphEdge(BaseModel):
    source: str
    target: str
    weight: float = Field(..., ge=0)


class CircuitGraph(BaseModel):
    """Layered view of a circuit: top-n kept kernels per layer, then the head."""

    head: ChannelRef
    sparsity: float
    layers: list[str]
    nodes: list[GraphNode]
    edges: list[GraphEdge] = Field(default_factory=list)

    def layer_nodes(self, layer: str) -> list[GraphNode]:
        return [n for n in self.nodes if n.layer == layer]
