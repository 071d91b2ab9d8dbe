"""Semantic embeddings from a frozen reference classifier and the statistics built on them.

The reference model is trained once, independently seeded, and never
attacked; its penultimate features stand in for an external image
embedder.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import torch

from app.errors import ConfigError, DegenerateEmbeddingError, InsufficientSamplesError, ShapeMismatchError
from app.featvis.noise import DEFAULT_NOISE_THRESHOLD, is_noisy
from app.models.report_models import SimilaritySummary
from app.network.mini_alexnet import penultimate
from app.network.params import ModelParams

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 20
DENOMINATOR_FLOOR = 1e-6


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    source: str = ""


def _normalize_rows(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError("an image has an all-zero reference embedding")
    return features / norms


class ReferenceEmbedder:
    """L2-normalised penultimate features of the frozen reference model."""

    def __init__(self, params: ModelParams | None) -> None:
        self._params = params

    @property
    def params(self) -> ModelParams:
        if self._params is None:
            raise ConfigError("reference embedder model is not loaded")
        return self._params

    @torch.no_grad()
    def embed_many(self, images: torch.Tensor) -> np.ndarray:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if tuple(images.shape[1:]) != tuple(self.params.input_shape):
            raise ShapeMismatchError(
                f"embedder expects {list(self.params.input_shape)}, got {list(images.shape[1:])}"
            )
        features = penultimate(self.params, images).to(torch.float64).numpy()
        return _normalize_rows(features)

    def embed(self, image: torch.Tensor, source: str = "") -> Embedding:
        return Embedding(vector=self.embed_many(image)[0], source=source)


# ── Set-level statistics ──────────────────────────────────────────────────────


def _unit_mean(vectors: np.ndarray) -> np.ndarray:
    mean = vectors.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise DegenerateEmbeddingError("mean embedding has zero norm")
    return mean / norm


def semantic_delta_from_embeddings(initial: np.ndarray, final: np.ndarray) -> float:
    """``1 - cos(mean(initial), mean(final))`` clipped to ``[0, 2]``."""
    if initial.shape[0] == 0 or final.shape[0] == 0:
        raise InsufficientSamplesError("semantic delta needs two nonempty image sets")
    a, b = _unit_mean(initial), _unit_mean(final)
    if np.array_equal(a, b):
        return 0.0
    return float(np.clip(1.0 - np.dot(a, b), 0.0, 2.0))


def semantic_delta(
    initial_topk: torch.Tensor, final_topk: torch.Tensor, embedder: ReferenceEmbedder
) -> float:
    return semantic_delta_from_embeddings(embedder.embed_many(initial_topk), embedder.embed_many(final_topk))


def pairwise_values(vectors: np.ndarray) -> list[float]:
    """All ``n(n-1)/2`` cosine similarities of unit vectors, in (i < j) order."""
    return [
        float(np.clip(np.dot(vectors[i], vectors[j]), -1.0, 1.0))
        for i, j in itertools.combinations(range(vectors.shape[0]), 2)
    ]


def summarize_similarities(values: list[float], noisy_dropped: int = 0) -> SimilaritySummary:
    arr = np.asarray(values, dtype=np.float64)
    histogram, _ = np.histogram(arr, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
    return SimilaritySummary(
        count=len(values),
        mean=float(arr.mean()),
        std=float(arr.std()),
        histogram=[int(h) for h in histogram],
        noisy_dropped=noisy_dropped,
    )


def pairwise_similarity(
    images: torch.Tensor,
    embedder: ReferenceEmbedder,
    noise_threshold: float = DEFAULT_NOISE_THRESHOLD,
) -> tuple[list[float], SimilaritySummary]:
    """Cosine similarities between every pair of non-noisy images."""
    keep = [i for i in range(images.shape[0]) if not is_noisy(images[i], noise_threshold)]
    if len(keep) < 2:
        raise InsufficientSamplesError(f"only {len(keep)} non-noisy image(s) remain; need 2")
    values = pairwise_values(embedder.embed_many(images[keep]))
    return values, summarize_similarities(values, noisy_dropped=images.shape[0] - len(keep))


# ── Similarity ratio ──────────────────────────────────────────────────────────


@dataclass(frozen=True)
class RatioParts:
    ratio: float
    numerator: float
    denominator: float
    argmax: int
    degenerate: bool


def ratio_from_embeddings(final: np.ndarray, initial_layer: np.ndarray, same_index: int) -> RatioParts:
    """Max cosine of ``final`` to any initial-layer embedding over its cosine to its own initial.

    The denominator is floored at 1e-6 and flagged when the floor applies.
    """
    if initial_layer.shape[0] == 0 or not 0 <= same_index < initial_layer.shape[0]:
        raise InsufficientSamplesError("the initial layer set must contain the same-channel image")
    cosines = initial_layer @ final
    numerator = float(cosines.max())
    denominator = float(cosines[same_index])
    degenerate = denominator < DENOMINATOR_FLOOR
    if degenerate:
        logger.warning("similarity ratio denominator %.3g below floor; flagged", denominator)
    return RatioParts(
        ratio=numerator / max(denominator, DENOMINATOR_FLOOR),
        numerator=numerator,
        denominator=denominator,
        argmax=int(cosines.argmax()),
        degenerate=degenerate,
    )


def similarity_ratio(
    final_synth: torch.Tensor,
    initial_synths_layer: torch.Tensor,
    same_channel_index: int,
    embedder: ReferenceEmbedder,
) -> RatioParts:
    """CT4 ratio for one channel; ``same_channel_index`` selects its own initial image."""
    return ratio_from_embeddings(
        embedder.embed(final_synth).vector, embedder.embed_many(initial_synths_layer), same_channel_index
    )
