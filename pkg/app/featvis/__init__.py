"""Synthetic and natural feature visualization."""

from app.featvis.activation import channel_activation, channel_energy, dataset_energy, layer_energy
from app.featvis.natural import TopKEntry, TopKResult, natural_topk
from app.featvis.noise import is_noisy, total_variation, uniform_noise_tv
from app.featvis.synthetic import SynthResult, synth_featvis

__all__ = [
    "SynthResult",
    "TopKEntry",
    "TopKResult",
    "channel_activation",
    "channel_energy",
    "dataset_energy",
    "is_noisy",
    "layer_energy",
    "natural_topk",
    "synth_featvis",
    "total_variation",
    "uniform_noise_tv",
]
