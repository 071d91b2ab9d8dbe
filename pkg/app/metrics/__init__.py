"""Evaluation metrics: rank correlations, semantic change and similarity statistics."""

from app.metrics.embedding import (
    Embedding,
    ReferenceEmbedder,
    pairwise_similarity,
    pairwise_values,
    ratio_from_embeddings,
    semantic_delta,
    semantic_delta_from_embeddings,
    similarity_ratio,
    summarize_similarities,
)
from app.metrics.evaluation import SynthCache, evaluate_models
from app.metrics.rank import attribution_rank_correlation, kendall_tau

__all__ = [
    "Embedding",
    "ReferenceEmbedder",
    "SynthCache",
    "attribution_rank_correlation",
    "evaluate_models",
    "kendall_tau",
    "pairwise_similarity",
    "pairwise_values",
    "ratio_from_embeddings",
    "semantic_delta",
    "semantic_delta_from_embeddings",
    "similarity_ratio",
    "summarize_similarities",
]
