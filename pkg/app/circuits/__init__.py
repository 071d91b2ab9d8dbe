"""SNIP attribution, circuit extraction, masked execution and graph export."""

from app.circuits.attribution import kernel_attributions, snip_attribution
from app.circuits.extraction import circuit_forward, extract_circuit, head_pearson, kernel_masks, pearson
from app.circuits.graph import build_circuit_graph, export_dot

__all__ = [
    "build_circuit_graph",
    "circuit_forward",
    "export_dot",
    "extract_circuit",
    "head_pearson",
    "kernel_attributions",
    "kernel_masks",
    "pearson",
    "snip_attribution",
]
