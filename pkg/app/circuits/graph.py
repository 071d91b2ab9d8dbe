"""Layered circuit graphs and their GraphViz DOT export."""

from __future__ import annotations

import logging
from pathlib import Path

import graphviz

from app.errors import ArtifactIOError, EmptyGraphError, KernelSetMismatchError
from app.models.circuit_models import (
    AttributionTable,
    CircuitGraph,
    CircuitMask,
    GraphEdge,
    GraphNode,
)
from app.models.network_models import KernelId

logger = logging.getLogger(__name__)


def build_circuit_graph(
    table: AttributionTable,
    mask: CircuitMask,
    top_n: int = 4,
    images: dict[KernelId, Path] | None = None,
) -> CircuitGraph:
    """Top ``top_n`` kept kernels per ancestor layer, the head, and all edges
    between consecutive layers weighted by the source node's attribution."""
    if table.head != mask.head:
        raise KernelSetMismatchError(f"table head {table.head} differs from mask head {mask.head}")
    if {(e.layer, e.channel) for e in table.entries} != {(e.layer, e.channel) for e in mask.entries}:
        raise KernelSetMismatchError("attribution table and mask cover different kernels")
    images = images or {}
    head = table.head

    def node(layer: str, channel: int, is_head: bool = False) -> GraphNode:
        path = images.get(KernelId(layer=layer, out_channel=channel))
        return GraphNode(
            layer=layer,
            channel=channel,
            attribution=table.score(layer, channel),
            image=str(path) if path is not None else None,
            is_head=is_head,
        )

    layers: list[str] = []
    nodes: list[GraphNode] = []
    for layer in table.layers:
        if layer == head.layer:
            continue
        kept = [e for e in table.layer_entries(layer) if e.channel in set(mask.kept(layer))]
        top = sorted(kept, key=lambda e: (-e.score, e.channel))[:top_n]
        if top:
            layers.append(layer)
            nodes.extend(node(layer, e.channel) for e in top)
    layers.append(head.layer)
    nodes.append(node(head.layer, head.channel, is_head=True))

    graph = CircuitGraph(head=head, sparsity=mask.sparsity, layers=layers, nodes=nodes)
    for upper, lower in zip(layers, layers[1:]):
        for src in graph.layer_nodes(upper):
            for dst in graph.layer_nodes(lower):
                graph.edges.append(GraphEdge(source=src.node_id, target=dst.node_id, weight=src.attribution))
    return graph


def _edge_colour(weight: float, max_weight: float) -> str:
    alpha = 0 if max_weight <= 0 else round(255 * weight / max_weight)
    return f"#000000{alpha:02x}"


def to_digraph(graph: CircuitGraph) -> graphviz.Digraph:
    if not graph.nodes:
        raise EmptyGraphError(f"circuit graph for {graph.head} has no nodes")
    dot = graphviz.Digraph(
        name=f"circuit_{graph.head.layer}_{graph.head.channel}",
        graph_attr={"rankdir": "TB", "label": f"{graph.head} @ sparsity {graph.sparsity:g}"},
        node_attr={"shape": "box", "fontsize": "10"},
    )
    for layer in graph.layers:
        with dot.subgraph(name=f"rank_{layer}") as sub:
            sub.attr(rank="same")
            for n in graph.layer_nodes(layer):
                attrs = {"tooltip": f"attribution {n.attribution:.6g}"}
                if n.image:
                    attrs.update(image=n.image, imagescale="true", labelloc="b")
                if n.is_head:
                    attrs.update(penwidth="2", color="firebrick")
                sub.node(n.node_id, n.label, **attrs)

    max_weight = max((e.weight for e in graph.edges), default=0.0)
    for e in graph.edges:
        dot.edge(e.source, e.target, color=_edge_colour(e.weight, max_weight))
    return dot


def export_dot(graph: CircuitGraph, path: Path | str) -> Path:
    """Write the graph as DOT text; edge opacity is linear in normalised attribution."""
    path = Path(path)
    source = to_digraph(graph).source
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(source, encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write graph {path}: {exc.strerror or exc}") from exc
    logger.info("Wrote circuit graph %s (%d nodes, %d edges)", path, len(graph.nodes), len(graph.edges))
    return path
